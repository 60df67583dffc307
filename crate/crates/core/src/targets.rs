//! Supervision derived from ground-truth boxes: anchor labels and residuals,
//! ray-cast depth at feature pixels, and per-class center heatmaps.

use crate::boxes::{encode_box, Box7, BoxOffset, Class};
use crate::detector::{AnchorSet, NUM_CLASSES};
use crate::error::Result;
use crate::eval::{rotated_iou_bev, GtBox};
use crate::losses::AnchorLabel;
use crate::stereo::{DepthGrid, FeatureGeometry};
use crate::tensor::Tensor;

/// `(positive, negative)` BEV IoU thresholds.
pub fn iou_thresholds(class: Class) -> (f64, f64) {
    match class {
        Class::Vehicle => (0.6, 0.45),
        Class::Pedestrian => (0.5, 0.35),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    /// One label per anchor id.
    pub labels: Vec<AnchorLabel>,
    /// `(anchor id, gt index, residual)` for every positive anchor, by id.
    pub positives: Vec<(usize, usize, BoxOffset)>,
}

impl AnchorTargets {
    /// Labels for the (A·K, Z, X) logit map: an anchor's own-class logit
    /// carries its label, other-class logits are negatives unless ignored.
    pub fn logit_labels(&self, anchors: &AnchorSet) -> Vec<AnchorLabel> {
        let mut out = vec![AnchorLabel::Negative; anchors.len() * NUM_CLASSES];
        let cells = anchors.nx * anchors.nz;
        for (id, &label) in self.labels.iter().enumerate() {
            let (slot, z, x) = anchors.cell(id);
            for k in 0..NUM_CLASSES {
                let idx = (slot * NUM_CLASSES + k) * cells + z * anchors.nx + x;
                out[idx] = match label {
                    AnchorLabel::Ignore => AnchorLabel::Ignore,
                    AnchorLabel::Positive if k == anchors.class(id).index() => AnchorLabel::Positive,
                    _ => AnchorLabel::Negative,
                };
            }
        }
        out
    }
}

/// Same-class IoU assignment. The best reachable anchor of every box is
/// forced positive; anchors above the positive threshold whose yaw cannot
/// reach the box are ignored.
pub fn assign_anchors(anchors: &AnchorSet, gts: &[GtBox]) -> Result<AnchorTargets> {
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut best_gt = vec![usize::MAX; anchors.len()];
    let mut per_gt_best: Vec<Option<(usize, f64)>> = vec![None; gts.len()];
    for (id, a) in anchors.boxes.iter().enumerate() {
        let class = anchors.class(id);
        for (j, g) in gts.iter().enumerate() {
            if g.class != class {
                continue;
            }
            let reach = 0.5 * (a.l.hypot(a.w) + g.bbox.l.hypot(g.bbox.w));
            if (a.x - g.bbox.x).hypot(a.z - g.bbox.z) >= reach {
                continue;
            }
            let iou = rotated_iou_bev(a, &g.bbox)?;
            if iou > best_iou[id] {
                best_iou[id] = iou;
                best_gt[id] = j;
            }
            let reachable = encode_box(a, &g.bbox).is_ok();
            if reachable && iou > 0.0 && per_gt_best[j].is_none_or(|(_, b)| iou > b) {
                per_gt_best[j] = Some((id, iou));
            }
        }
    }
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut matched = vec![usize::MAX; anchors.len()];
    for id in 0..anchors.len() {
        let (pos, neg) = iou_thresholds(anchors.class(id));
        if best_iou[id] >= pos {
            labels[id] = AnchorLabel::Positive;
            matched[id] = best_gt[id];
        } else if best_iou[id] >= neg {
            labels[id] = AnchorLabel::Ignore;
        }
    }
    for (j, b) in per_gt_best.iter().enumerate() {
        if let Some((id, _)) = *b {
            labels[id] = AnchorLabel::Positive;
            matched[id] = j;
        }
    }
    let mut positives = Vec::new();
    for id in 0..anchors.len() {
        if labels[id] != AnchorLabel::Positive {
            continue;
        }
        match encode_box(&anchors.boxes[id], &gts[matched[id]].bbox) {
            Ok(r) => positives.push((id, matched[id], r)),
            Err(_) => labels[id] = AnchorLabel::Ignore,
        }
    }
    Ok(AnchorTargets { labels, positives })
}

/// Nearest positive ray parameter at which `origin + t·dir` enters `b`.
pub fn ray_box_hit(b: &Box7, dir: (f64, f64, f64)) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    // Box-local axes: length (c, 0, −s), height (0, 1, 0), width (s, 0, c).
    let local = |v: (f64, f64, f64)| (v.0 * c - v.2 * s, v.1, v.0 * s + v.2 * c);
    let o = local((-b.x, -b.y, -b.z));
    let d = local(dir);
    let half = [b.l / 2.0, b.h / 2.0, b.w / 2.0];
    let (o, d) = ([o.0, o.1, o.2], [d.0, d.1, d.2]);
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t1 >= t0 && t0 > 0.0).then_some(t0)
}

/// Depth of the first box surface along each feature pixel's ray, with a
/// mask of pixels that hit a box within the depth range. Row-major (H', W').
pub fn depth_targets(fg: &FeatureGeometry, depth: &DepthGrid, gts: &[GtBox]) -> (Tensor, Vec<bool>) {
    let (h, w) = (fg.height(), fg.width());
    let s = fg.stride as f64;
    let r = &fg.rig;
    let mut z = vec![0.0; h * w];
    let mut mask = vec![false; h * w];
    for v in 0..h {
        for u in 0..w {
            let dir = ((u as f64 * s - r.cx) / r.fx, (v as f64 * s - r.cy) / r.fy, 1.0);
            let hit = gts
                .iter()
                .filter_map(|g| ray_box_hit(&g.bbox, dir))
                .fold(f64::INFINITY, f64::min);
            if hit >= depth.z_min && hit <= depth.z_max() {
                z[v * w + u] = hit;
                mask[v * w + u] = true;
            }
        }
    }
    (Tensor::new(vec![h, w], z).expect("sized"), mask)
}

/// Per-class Gaussian (σ = 1 feature pixel) heatmap at projected box
/// centers, max over boxes: (K, H', W').
pub fn center_heatmap(fg: &FeatureGeometry, gts: &[GtBox]) -> Tensor {
    let (h, w) = (fg.height(), fg.width());
    let mut t = Tensor::zeros(vec![NUM_CLASSES, h, w]);
    for g in gts {
        let (cu, cv) = fg.project(g.bbox.x, g.bbox.y, g.bbox.z);
        let base = g.class.index() * h * w;
        let d = t.data_mut();
        for v in 0..h {
            for u in 0..w {
                let r2 = (u as f64 - cu).powi(2) + (v as f64 - cv).powi(2);
                let val = (-0.5 * r2).exp();
                let i = base + v * w + u;
                d[i] = d[i].max(val);
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Difficulty;
    use crate::stereo::DetectionGrid;

    fn gt(class: Class, x: f64, z: f64) -> GtBox {
        GtBox {
            class,
            difficulty: Difficulty::Easy,
            bbox: Box7 {
                x,
                z,
                ..class.template()
            },
        }
    }

    #[test]
    fn every_box_gets_a_positive_of_its_class() {
        let anchors = AnchorSet::new(&DetectionGrid::desk());
        let gts = [gt(Class::Vehicle, 0.3, 7.1), gt(Class::Pedestrian, -2.1, 5.3)];
        let t = assign_anchors(&anchors, &gts).unwrap();
        for j in 0..2 {
            let ids: Vec<usize> = t.positives.iter().filter(|p| p.1 == j).map(|p| p.0).collect();
            assert!(!ids.is_empty());
            assert!(ids.iter().all(|&id| anchors.class(id) == gts[j].class));
        }
        let pos_logits = t.logit_labels(&anchors).iter().filter(|&&l| l == AnchorLabel::Positive).count();
        assert_eq!(pos_logits, t.positives.len());
    }

    #[test]
    fn ray_hits_front_face() {
        let b = Box7 {
            x: 0.0,
            y: 0.0,
            z: 10.0,
            h: 2.0,
            w: 2.0,
            l: 4.0,
            yaw: 0.0,
        };
        // Yaw 0: width runs along z, so the front face is at z = 9.
        assert_eq!(ray_box_hit(&b, (0.0, 0.0, 1.0)), Some(9.0));
        assert_eq!(ray_box_hit(&b, (1.0, 0.0, 1.0)), None);
    }
}
