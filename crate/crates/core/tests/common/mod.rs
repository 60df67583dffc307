//! Independent reference implementations used as test oracles. Each one is
//! written directly from the defining formula with plain loops and shares no
//! code with the library beyond its data types.
#![allow(dead_code)]

use evstereo::boxes::{Box7, Class, Detection};
use evstereo::eval::{Difficulty, GroundTruthFrame, GtBox};
use evstereo::event::{Event, EventStream};
use evstereo::harness::{self, RunConfig};
use evstereo::model::ModelConfig;
use evstereo::stereo::{DepthGrid, DetectionGrid, StereoRig};
use evstereo::synth::{Keyframe, ObjectSpec, SceneSpec};
use evstereo::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn desk_rig() -> StereoRig {
    StereoRig {
        fx: 48.0,
        fy: 48.0,
        cx: 31.5,
        cy: 23.5,
        baseline_m: 1.0,
        width: 64,
        height: 48,
    }
}

pub fn random_stream(r: &mut ChaCha8Rng, w: u16, h: u16, n: usize, t_max: i64) -> EventStream {
    let mut t: Vec<i64> = (0..n).map(|_| r.random_range(0..=t_max)).collect();
    t.sort_unstable();
    let events = t
        .into_iter()
        .map(|t| Event {
            u: r.random_range(0..w),
            v: r.random_range(0..h),
            t,
            p: if r.random_bool(0.5) { 1 } else { -1 },
        })
        .collect();
    EventStream::new(w, h, events).expect("valid stream")
}

fn tri(a: f64) -> f64 {
    (1.0 - a.abs()).max(0.0)
}

/// Cell-by-cell evaluation of the voxel-grid sum over every event.
pub fn voxel_oracle(s: &EventStream, bins: usize) -> Vec<f64> {
    let (w, h) = (s.width as usize, s.height as usize);
    let ev = s.events();
    let mut out = vec![0.0; bins * h * w];
    if ev.is_empty() {
        return out;
    }
    let (t1, tn) = (ev[0].t as f64, ev[ev.len() - 1].t as f64);
    for b in 0..bins {
        for v in 0..h {
            for u in 0..w {
                let mut acc = 0.0;
                for e in ev {
                    let bstar = if tn > t1 { (bins - 1) as f64 * (e.t as f64 - t1) / (tn - t1) } else { 0.0 };
                    acc += e.p as f64 * tri(u as f64 - e.u as f64) * tri(v as f64 - e.v as f64) * tri(b as f64 - bstar);
                }
                out[(b * h + v) * w + u] = acc;
            }
        }
    }
    out
}

/// Linear interpolation along a row, zero outside `[0, len - 1]`.
pub fn lerp_row(row: &[f64], x: f64) -> f64 {
    let n = row.len();
    if !(x >= 0.0 && x <= (n - 1) as f64) {
        return 0.0;
    }
    let i = x.floor() as usize;
    let f = x - i as f64;
    if i + 1 < n {
        row[i] * (1.0 - f) + row[i + 1] * f
    } else {
        row[i]
    }
}

/// Trilinear interpolation of a (D, H, W) array, zero outside.
pub fn trilinear(src: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    for a in 0..3 {
        if !(p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64) {
            return 0.0;
        }
    }
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let idx = [p[0].floor() as usize + dz, p[1].floor() as usize + dy, p[2].floor() as usize + dx];
                let wt: f64 = (0..3)
                    .map(|a| {
                        let f = p[a] - p[a].floor();
                        if [dz, dy, dx][a] == 1 {
                            f
                        } else {
                            1.0 - f
                        }
                    })
                    .product();
                if wt == 0.0 {
                    continue;
                }
                acc += wt * src[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]];
            }
        }
    }
    acc
}

pub fn disparity_px(rig: &StereoRig, z: f64, stride: usize) -> f64 {
    rig.fx * rig.baseline_m / z / stride as f64
}

pub fn feature_project(rig: &StereoRig, x: f64, y: f64, z: f64, stride: usize) -> (f64, f64) {
    ((rig.fx * x / z + rig.cx) / stride as f64, (rig.fy * y / z + rig.cy) / stride as f64)
}

/// Plane-sweep volume (2C, D, H, W) by direct gather.
pub fn psv_oracle(left: &Tensor, right: &Tensor, rig: &StereoRig, stride: usize, depth: &DepthGrid) -> Vec<f64> {
    let s = left.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = depth.levels;
    let mut out = vec![0.0; 2 * c * d * h * w];
    for ch in 0..c {
        for lvl in 0..d {
            let z = depth.z_min + lvl as f64 * depth.interval;
            let disp = disparity_px(rig, z, stride);
            for v in 0..h {
                let row = &right.data()[(ch * h + v) * w..(ch * h + v + 1) * w];
                for u in 0..w {
                    out[((ch * d + lvl) * h + v) * w + u] = left.data()[(ch * h + v) * w + u];
                    out[(((ch + c) * d + lvl) * h + v) * w + u] = lerp_row(row, u as f64 - disp);
                }
            }
        }
    }
    out
}

/// Source (C, D, H, W) sampled at every voxel center: (C, Y, Z, X).
pub fn lift_oracle(src: &Tensor, rig: &StereoRig, stride: usize, depth: &DepthGrid, grid: &DetectionGrid) -> Vec<f64> {
    let s = src.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let n = |r: [f64; 2]| ((r[1] - r[0]) / grid.voxel).round() as usize;
    let (nx, ny, nz) = (n(grid.x_range), n(grid.y_range), n(grid.z_range));
    let mut out = Vec::with_capacity(c * ny * nz * nx);
    for ch in 0..c {
        let vol = &src.data()[ch * d * h * w..(ch + 1) * d * h * w];
        for j in 0..ny {
            for k in 0..nz {
                for i in 0..nx {
                    let x = grid.x_range[0] + (i as f64 + 0.5) * grid.voxel;
                    let y = grid.y_range[0] + (j as f64 + 0.5) * grid.voxel;
                    let z = grid.z_range[0] + (k as f64 + 0.5) * grid.voxel;
                    let (u, v) = feature_project(rig, x, y, z, stride);
                    let wi = (z - depth.z_min) / depth.interval;
                    out.push(trilinear(vol, [d, h, w], [wi, v, u]));
                }
            }
        }
    }
    out
}

/// Right features warped into the left view by a per-pixel depth map.
pub fn warp_oracle(right: &Tensor, depth_map: &[f64], rig: &StereoRig, stride: usize) -> Vec<f64> {
    let s = right.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for v in 0..h {
            let row = &right.data()[(ch * h + v) * w..(ch * h + v + 1) * w];
            for u in 0..w {
                let z = depth_map[v * w + u];
                if z > 0.0 {
                    out[(ch * h + v) * w + u] = lerp_row(row, u as f64 - disparity_px(rig, z, stride));
                }
            }
        }
    }
    out
}

pub fn clamp_neighbor(off: (i32, i32), u: usize, v: usize, w: usize, h: usize) -> (usize, usize) {
    (
        (u as i64 + off.0 as i64).clamp(0, w as i64 - 1) as usize,
        (v as i64 + off.1 as i64).clamp(0, h as i64 - 1) as usize,
    )
}

/// `S_m(u, v)` by explicit inner products: (M, H, W).
pub fn similarity_oracle(
    left: &Tensor,
    right: &Tensor,
    depth_map: &[f64],
    offsets: &[(i32, i32)],
    rig: &StereoRig,
    stride: usize,
) -> Vec<f64> {
    let s = left.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; offsets.len() * h * w];
    for (m, &off) in offsets.iter().enumerate() {
        for v in 0..h {
            for u in 0..w {
                let (un, vn) = clamp_neighbor(off, u, v, w, h);
                let x = u as f64 - disparity_px(rig, depth_map[vn * w + un], stride);
                let mut acc = 0.0;
                for ch in 0..c {
                    let row = &right.data()[(ch * h + v) * w..(ch * h + v + 1) * w];
                    acc += left.data()[(ch * h + v) * w + u] * lerp_row(row, x);
                }
                out[(m * h + v) * w + u] = acc;
            }
        }
    }
    out
}

pub fn mean_and_variance(prob: &Tensor, depth: &DepthGrid) -> (Vec<f64>, Vec<f64>) {
    let s = prob.shape();
    let (d, hw) = (s[0], s[1] * s[2]);
    let p = prob.data();
    let mut mean = vec![0.0; hw];
    let mut var = vec![0.0; hw];
    for i in 0..hw {
        mean[i] = (0..d).map(|l| p[l * hw + i] * (depth.z_min + l as f64 * depth.interval)).sum();
        var[i] = (0..d)
            .map(|l| p[l * hw + i] * (depth.z_min + l as f64 * depth.interval - mean[i]).powi(2))
            .sum();
    }
    (mean, var)
}

/// Neighbor-gathered variance: (M, H, W).
pub fn confidence_oracle(prob: &Tensor, depth: &DepthGrid, offsets: &[(i32, i32)]) -> Vec<f64> {
    let s = prob.shape();
    let (h, w) = (s[1], s[2]);
    let (_, var) = mean_and_variance(prob, depth);
    let mut out = Vec::with_capacity(offsets.len() * h * w);
    for &off in offsets {
        for v in 0..h {
            for u in 0..w {
                let (un, vn) = clamp_neighbor(off, u, v, w, h);
                out.push(var[vn * w + un]);
            }
        }
    }
    out
}

/// Neighborhood mixture with softmax weights of `S·sigmoid(C)`: (D, H, W).
pub fn refine_oracle(prob: &Tensor, sim: &[f64], conf: &[f64], offsets: &[(i32, i32)]) -> Vec<f64> {
    let s = prob.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let m = offsets.len();
    let mut out = vec![0.0; d * h * w];
    for v in 0..h {
        for u in 0..w {
            let logits: Vec<f64> = (0..m)
                .map(|k| {
                    let i = (k * h + v) * w + u;
                    sim[i] / (1.0 + (-conf[i]).exp())
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for (k, &off) in offsets.iter().enumerate() {
                let a = (logits[k] - mx).exp() / z;
                let (un, vn) = clamp_neighbor(off, u, v, w, h);
                for l in 0..d {
                    out[(l * h + v) * w + u] += a * prob.data()[(l * h + vn) * w + un];
                }
            }
        }
    }
    out
}

/// Point-in-footprint test from the box's own length and width axes.
pub fn in_footprint(b: &Box7, x: f64, z: f64) -> Option<(f64, f64)> {
    let len_axis = (b.yaw.cos(), -b.yaw.sin());
    let wid_axis = (b.yaw.sin(), b.yaw.cos());
    let (dx, dz) = (x - b.x, z - b.z);
    let a = dx * len_axis.0 + dz * len_axis.1;
    let c = dx * wid_axis.0 + dz * wid_axis.1;
    (a.abs() <= b.l / 2.0 && c.abs() <= b.w / 2.0).then_some((a, c))
}

/// Monte-Carlo BEV IoU over the joint bounding rectangle.
pub fn iou_bev_mc(a: &Box7, b: &Box7, samples: usize, r: &mut ChaCha8Rng) -> f64 {
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    let (x0, x1) = ((a.x - ra).min(b.x - rb), (a.x + ra).max(b.x + rb));
    let (z0, z1) = ((a.z - ra).min(b.z - rb), (a.z + ra).max(b.z + rb));
    let (mut ia, mut ib, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..samples {
        let x = r.random_range(x0..x1);
        let z = r.random_range(z0..z1);
        let (pa, pb) = (in_footprint(a, x, z).is_some(), in_footprint(b, x, z).is_some());
        ia += pa as usize;
        ib += pb as usize;
        both += (pa && pb) as usize;
    }
    let union = ia + ib - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Monte-Carlo 3-D IoU over the joint bounding box.
pub fn iou_3d_mc(a: &Box7, b: &Box7, samples: usize, r: &mut ChaCha8Rng) -> f64 {
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    let (x0, x1) = ((a.x - ra).min(b.x - rb), (a.x + ra).max(b.x + rb));
    let (z0, z1) = ((a.z - ra).min(b.z - rb), (a.z + ra).max(b.z + rb));
    let (y0, y1) = ((a.y - a.h / 2.0).min(b.y - b.h / 2.0), (a.y + a.h / 2.0).max(b.y + b.h / 2.0));
    let inside = |bx: &Box7, x: f64, y: f64, z: f64| in_footprint(bx, x, z).is_some() && (y - bx.y).abs() <= bx.h / 2.0;
    let (mut ia, mut ib, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..samples {
        let (x, y, z) = (r.random_range(x0..x1), r.random_range(y0..y1), r.random_range(z0..z1));
        let (pa, pb) = (inside(a, x, y, z), inside(b, x, y, z));
        ia += pa as usize;
        ib += pb as usize;
        both += (pa && pb) as usize;
    }
    let union = ia + ib - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

pub fn random_box(r: &mut ChaCha8Rng, spread: f64) -> Box7 {
    Box7 {
        x: r.random_range(-spread..spread),
        y: r.random_range(-0.5..0.5),
        z: r.random_range(-spread..spread),
        h: r.random_range(0.5..2.5),
        w: r.random_range(0.4..2.5),
        l: r.random_range(0.4..5.0),
        yaw: r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    }
}

/// A detection in an AP case: frame, score and whether it hits GT box `gt`
/// of that frame (None for a false positive placed far away).
#[derive(Clone, Copy, Debug)]
pub struct CaseDet {
    pub frame: usize,
    pub score: f64,
    pub gt: Option<usize>,
}

/// AP (R40, ×100) by enumerating every score threshold: at each threshold
/// the detections above it are matched greedily in score order, and the
/// interpolated precision at recall r is the best precision over all
/// thresholds reaching recall r.
pub fn ap_enumeration_oracle(dets: &[CaseDet], gt_per_frame: &[usize]) -> f64 {
    let num_gt: usize = gt_per_frame.iter().sum();
    if num_gt == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = dets.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for &t in &thresholds {
        let mut kept: Vec<&CaseDet> = dets.iter().filter(|d| d.score >= t).collect();
        kept.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut used: Vec<Vec<bool>> = gt_per_frame.iter().map(|&n| vec![false; n]).collect();
        let mut tp = 0;
        for d in &kept {
            if let Some(g) = d.gt {
                if !used[d.frame][g] {
                    used[d.frame][g] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / kept.len() as f64));
    }
    let mut sum = 0.0;
    for i in 1..=40 {
        let r = i as f64 / 40.0;
        let best = points
            .iter()
            .filter(|p| p.0 + 1e-12 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        sum += best;
    }
    100.0 * sum / 40.0
}

/// GT box `g` of frame `f` in an AP case: well separated unit-ish boxes.
pub fn case_gt_box(f: usize, g: usize) -> Box7 {
    Box7 {
        x: 10.0 * g as f64,
        y: 0.0,
        z: 5.0 * f as f64,
        h: 1.5,
        w: 1.0,
        l: 2.0,
        yaw: 0.0,
    }
}

pub fn case_class() -> Class {
    Class::Vehicle
}

/// A random AP case with distinct scores: 1..=4 frames of 0..=3 boxes,
/// hits, duplicate hits and far-away false positives.
pub fn random_ap_case(r: &mut ChaCha8Rng) -> (Vec<CaseDet>, Vec<usize>) {
    let frames = r.random_range(1..=4);
    let gt: Vec<usize> = (0..frames).map(|_| r.random_range(0..=3)).collect();
    let n = r.random_range(0..=12);
    let mut scores: Vec<f64> = (0..n).map(|i| (i as f64 + r.random_range(0.1..0.9)) / n as f64).collect();
    for i in (1..scores.len()).rev() {
        scores.swap(i, r.random_range(0..=i));
    }
    let dets = scores
        .into_iter()
        .map(|score| {
            let frame = r.random_range(0..frames);
            let gt_idx = (gt[frame] > 0 && r.random_bool(0.6)).then(|| r.random_range(0..gt[frame]));
            CaseDet { frame, score, gt: gt_idx }
        })
        .collect();
    (dets, gt)
}

pub fn case_time(frame: usize) -> i64 {
    frame as i64 * 5_000
}

/// Library inputs for an AP case: hits copy their GT box exactly.
pub fn case_inputs(dets: &[CaseDet], gt_per_frame: &[usize]) -> (Vec<Detection>, Vec<GroundTruthFrame>) {
    let frames = gt_per_frame
        .iter()
        .enumerate()
        .map(|(f, &n)| GroundTruthFrame {
            t_us: case_time(f),
            boxes: (0..n)
                .map(|g| GtBox {
                    class: case_class(),
                    difficulty: Difficulty::Easy,
                    bbox: case_gt_box(f, g),
                })
                .collect(),
        })
        .collect();
    let dets = dets
        .iter()
        .map(|d| Detection {
            t_us: case_time(d.frame),
            class: case_class(),
            score: d.score,
            bbox: match d.gt {
                Some(g) => case_gt_box(d.frame, g),
                None => Box7 {
                    x: -100.0,
                    ..case_gt_box(d.frame, 0)
                },
            },
        })
        .collect();
    (dets, frames)
}

/// The two-object desk scene: a vehicle and a pedestrian drifting across a
/// 64×48 rig over 100 ms.
pub fn desk_scene() -> SceneSpec {
    let track = |class, a: [f64; 7], b: [f64; 7]| ObjectSpec {
        class,
        texture_density: 0.15,
        keyframes: vec![
            Keyframe {
                t_us: 0,
                bbox: Box7::from(a),
            },
            Keyframe {
                t_us: 100_000,
                bbox: Box7::from(b),
            },
        ],
    };
    let quarter = std::f64::consts::FRAC_PI_2;
    SceneSpec {
        rig: desk_rig(),
        duration_us: 100_000,
        micro_step_us: 100,
        seed: 7,
        ego: vec![],
        objects: vec![
            track(
                Class::Vehicle,
                [1.0, 0.9, 8.0, 1.79, 1.86, 4.28, 0.0],
                [2.0, 0.9, 8.5, 1.79, 1.86, 4.28, 0.1],
            ),
            track(
                Class::Pedestrian,
                [-2.5, 0.8, 6.0, 1.73, 0.6, 0.8, quarter],
                [-2.2, 0.8, 5.6, 1.73, 0.6, 0.8, quarter],
            ),
        ],
    }
}

/// Synthesizes `scene` into `dir/data` and returns a desk-scale run
/// configuration reading it, with weights in `dir/weights`.
pub fn desk_run(dir: &Path, scene: &SceneSpec) -> RunConfig {
    harness::synthesize(scene, &dir.join("data")).unwrap();
    RunConfig {
        model: ModelConfig::desk(),
        stream_end_us: Some(scene.duration_us),
        seed: 1,
        ..RunConfig::for_dataset(&dir.join("data"), &dir.join("weights"))
    }
}
