//! Rotated-box overlap and R40 average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{Box7, Class, Detection};
use crate::error::{Error, Result};

type Pt = (f64, f64);

fn signed_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - a.1 * b.0
        })
        .sum::<f64>()
        / 2.0
}

fn ccw(mut poly: Vec<Pt>) -> Vec<Pt> {
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

/// Sutherland–Hodgman clipping of `subject` by the convex `clip`; both
/// counter-clockwise.
fn clip_convex(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: Pt| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

fn bev_polygon(b: &Box7) -> Vec<Pt> {
    ccw(b.bev_corners().to_vec())
}

fn check_area(b: &Box7) -> Result<()> {
    if !(b.w > 0.0 && b.l > 0.0 && b.h > 0.0) || !b.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(format!("degenerate box {b:?}")));
    }
    Ok(())
}

/// Intersection area of the two footprints.
pub fn bev_intersection(a: &Box7, b: &Box7) -> Result<f64> {
    check_area(a)?;
    check_area(b)?;
    let poly = clip_convex(&bev_polygon(a), &bev_polygon(b));
    if poly.len() < 3 {
        return Ok(0.0);
    }
    Ok(signed_area(&poly).abs())
}

pub fn rotated_iou_bev(a: &Box7, b: &Box7) -> Result<f64> {
    let inter = bev_intersection(a, b)?;
    let union = a.w * a.l + b.w * b.l - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

fn vertical_overlap(a: &Box7, b: &Box7) -> f64 {
    let lo = (a.y - a.h / 2.0).max(b.y - b.h / 2.0);
    let hi = (a.y + a.h / 2.0).min(b.y + b.h / 2.0);
    (hi - lo).max(0.0)
}

pub fn iou_3d(a: &Box7, b: &Box7) -> Result<f64> {
    let inter = bev_intersection(a, b)? * vertical_overlap(a, b);
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
}

impl Difficulty {
    pub const ALL: [Difficulty; 2] = [Difficulty::Easy, Difficulty::Moderate];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
        }
    }

    /// Buckets are cumulative: moderate evaluation also counts easy boxes.
    pub fn admits(self, label: Difficulty) -> bool {
        label <= self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "AP_3D")]
    Ap3d,
    #[serde(rename = "AP_BEV")]
    ApBev,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Ap3d, Metric::ApBev];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ap3d => "AP_3D",
            Metric::ApBev => "AP_BEV",
        }
    }

    pub fn iou(self, a: &Box7, b: &Box7) -> Result<f64> {
        match self {
            Metric::Ap3d => iou_3d(a, b),
            Metric::ApBev => rotated_iou_bev(a, b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: Class,
    pub difficulty: Difficulty,
    #[serde(rename = "box")]
    pub bbox: Box7,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub t_us: i64,
    pub boxes: Vec<GtBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ApResult {
    pub class: Class,
    pub difficulty: Difficulty,
    pub metric: Metric,
    pub value: f64,
}

/// 40-point interpolated AP (×100) from per-detection TP flags in
/// descending score order.
pub fn r40_from_flags(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in tp_flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    r40_from_curve(&curve)
}

/// 40-point interpolation over `(recall, precision)` points: mean over
/// r = 1/40..1 of the best precision at recall ≥ r.
pub fn r40_from_curve(curve: &[(f64, f64)]) -> f64 {
    let total: f64 = (1..=40)
        .map(|i| {
            let r = i as f64 / 40.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum();
    100.0 * total / 40.0
}

/// Per-frame greedy matching in global score order. Returns TP flags in the
/// order of the sorted detections and the number of admitted GT boxes.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthFrame],
    class: Class,
    iou_threshold: f64,
    difficulty: Difficulty,
    metric: Metric,
) -> Result<(Vec<bool>, usize)> {
    let mut frames: BTreeMap<i64, (Vec<Box7>, Vec<bool>)> = BTreeMap::new();
    let mut num_gt = 0;
    for f in gts {
        let entry = frames.entry(f.t_us).or_default();
        for b in f.boxes.iter().filter(|b| b.class == class && difficulty.admits(b.difficulty)) {
            entry.0.push(b.bbox);
            entry.1.push(false);
            num_gt += 1;
        }
    }
    let mut order: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.t_us.cmp(&b.t_us)));
    let mut flags = Vec::with_capacity(order.len());
    for d in order {
        let mut hit = false;
        if let Some((boxes, used)) = frames.get_mut(&d.t_us) {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in boxes.iter().enumerate() {
                if used[i] {
                    continue;
                }
                let iou = metric.iou(&d.bbox, g)?;
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
            if let Some((i, _)) = best {
                used[i] = true;
                hit = true;
            }
        }
        flags.push(hit);
    }
    Ok((flags, num_gt))
}

pub fn ap_compute(
    dets: &[Detection],
    gts: &[GroundTruthFrame],
    class: Class,
    iou_threshold: f64,
    difficulty: Difficulty,
    metric: Metric,
) -> Result<ApResult> {
    let (flags, num_gt) = match_detections(dets, gts, class, iou_threshold, difficulty, metric)?;
    Ok(ApResult {
        class,
        difficulty,
        metric,
        value: r40_from_flags(&flags, num_gt),
    })
}

/// Mean over classes for every (difficulty, metric) present; every class
/// must be represented in each group.
pub fn map_summary(results: &[ApResult]) -> Result<Vec<(Difficulty, Metric, f64)>> {
    let mut groups: BTreeMap<(Difficulty, Metric), BTreeMap<Class, f64>> = BTreeMap::new();
    for r in results {
        groups.entry((r.difficulty, r.metric)).or_default().insert(r.class, r.value);
    }
    groups
        .into_iter()
        .map(|((d, m), per_class)| {
            if let Some(missing) = Class::ALL.iter().find(|c| !per_class.contains_key(c)) {
                return Err(Error::invalid(format!(
                    "mAP for {} {} is missing class {}",
                    d.name(),
                    m.name(),
                    missing.name()
                )));
            }
            Ok((d, m, per_class.values().sum::<f64>() / per_class.len() as f64))
        })
        .collect()
}
