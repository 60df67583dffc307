//! Finite-difference verification of every learnable module path and every
//! objective term, on small random instances.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneConfig};
use crate::detector::{self, DetectorConfig};
use crate::dual_filter as df;
use crate::error::Result;
use crate::losses::{self, AnchorLabel, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::nn;
use crate::stereo::DepthGrid;
use crate::tensor::gradcheck::{directional_check, primitive_suite};
use crate::tensor::{BoundParams, Graph, OpKind, ParamStore, Tensor, Var};

/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-6;
const DIRECTIONS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub path: String,
    pub rel_error: f64,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Weighted-sum readout `Σ r ⊙ y` with fixed positive weights.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, g.shape(y), 0.5, 1.5);
    let rc = g.constant(r);
    let p = g.mul(y, rc)?;
    g.sum_all(p)
}

/// Checks `f(data inputs, params)` with respect to both, via directional
/// derivatives.
fn module_case<F>(
    path: &str,
    seed: u64,
    store: &ParamStore,
    data: Vec<Tensor>,
    fault: Option<OpKind>,
    f: F,
) -> Result<CheckEntry>
where
    F: Fn(&mut Graph, &[Var], &BoundParams) -> Result<Var>,
{
    let nd = data.len();
    let mut inputs = data;
    inputs.extend(store.tensors().iter().cloned());
    let err = directional_check(
        |g, v| {
            let p = store.bind_vars(&v[nd..])?;
            let y = f(g, &v[..nd], &p)?;
            if g.value(y).numel() == 1 {
                Ok(y)
            } else {
                readout(g, y, seed)
            }
        },
        &inputs,
        STEP,
        DIRECTIONS,
        seed,
        fault,
    )?;
    Ok(CheckEntry {
        path: path.to_string(),
        rel_error: err,
    })
}

fn perturb_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().to_vec();
    for n in names {
        if n.ends_with(".bias") {
            let t = store.get_mut(&n).expect("listed");
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
    }
}

/// Module paths and objective terms, in report order.
pub fn module_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let c = 3;

    // Backbone trunk and heads.
    let bb = BackboneConfig {
        bins: 2,
        trunk_channels: [3, 3],
        channels: c,
    };
    let mut s = ParamStore::new();
    backbone::init_weights(&mut s, seed, &bb)?;
    perturb_biases(&mut s, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 8, 8], -1.0, 1.0);
    out.push(module_case("backbone", seed, &s, vec![x], fault, |g, v, p| {
        let (a, b) = backbone::extract_features(g, p, &bb, v[0])?;
        let cat = g.concat_axis(&[a, b], 0)?;
        Ok(cat)
    })?);

    // Depth probability reduction.
    let mut s = ParamStore::new();
    nn::add_conv(&mut s, seed, df::REDUCE[0], 1, 2 * c, &[3, 3, 3])?;
    nn::add_conv(&mut s, seed, df::REDUCE[1], 1, 1, &[3, 3, 3])?;
    perturb_biases(&mut s, &mut rng);
    let psv = rand_tensor(&mut rng, &[2 * c, 4, 3, 3], -1.0, 1.0);
    out.push(module_case("depth_probability", seed, &s, vec![psv], fault, |g, v, p| {
        df::depth_probability(g, p, v[0])
    })?);

    // Refinement: distribution, similarity and confidence inputs.
    let grid = DepthGrid {
        z_min: 1.0,
        interval: 0.5,
        levels: 4,
    };
    let pattern = df::NeighborPattern::default();
    let taps = Arc::new(df::neighbor_taps(&pattern, 3, 4)?);
    let logits = rand_tensor(&mut rng, &[4, 3, 4], -1.0, 1.0);
    let sim = rand_tensor(&mut rng, &[pattern.len(), 3, 4], -1.0, 1.0);
    let empty = ParamStore::new();
    out.push(module_case("refine_depth_probability", seed, &empty, vec![logits, sim], fault, |g, v, _| {
        let prob = g.softmax_axis(v[0], 0)?;
        let mean = df::expected_depth(g, prob, &grid)?;
        let conf = df::depth_confidence(g, prob, mean, &grid, taps.clone())?;
        let refined = df::refine_depth_probability(g, prob, v[1], conf, taps.clone())?;
        let d = df::expected_depth(g, refined, &grid)?;
        let d3 = g.reshape(d, &[1, 3, 4])?;
        g.concat_axis(&[refined, d3], 0)
    })?);

    // Channel attention.
    let mut s = ParamStore::new();
    df::init_weights(&mut s, seed, c)?;
    perturb_biases(&mut s, &mut rng);
    let mut attn = ParamStore::new();
    for (n, t) in s.iter().filter(|(n, _)| n.starts_with("attn.")) {
        attn.insert(n, t.clone())?;
    }
    let fl = rand_tensor(&mut rng, &[c, 3, 4], -1.0, 1.0);
    let fr = rand_tensor(&mut rng, &[c, 3, 4], -1.0, 1.0);
    out.push(module_case("enhance_semantic", seed, &attn, vec![fl, fr], fault, |g, v, p| {
        df::enhance_semantic(g, p, v[0], v[1])
    })?);

    // Voxel fusion.
    let mut fusion = ParamStore::new();
    nn::add_conv(&mut fusion, seed, df::FUSION, c, 3 * c, &[3, 3, 3])?;
    perturb_biases(&mut fusion, &mut rng);
    let geo = rand_tensor(&mut rng, &[2 * c, 2, 3, 3], -1.0, 1.0);
    let sem = rand_tensor(&mut rng, &[c, 2, 3, 3], -1.0, 1.0);
    out.push(module_case("fuse_voxels", seed, &fusion, vec![geo, sem], fault, |g, v, p| {
        df::fuse_voxels(g, p, v[0], v[1])
    })?);

    // Height collapse and dense head.
    let dc = DetectorConfig {
        voxel_channels: c,
        collapse_channels: 2,
        height_cells: 4,
        roi_k: 2,
        align_hidden: 4,
    };
    let mut s = ParamStore::new();
    detector::init_weights(&mut s, seed, &dc)?;
    perturb_biases(&mut s, &mut rng);
    let vox = rand_tensor(&mut rng, &[c, 4, 3, 3], -1.0, 1.0);
    out.push(module_case("bev_collapse", seed, &s, vec![vox], fault, |g, v, p| {
        detector::bev_collapse(g, p, detector::COLLAPSE, v[0])
    })?);
    let bev = rand_tensor(&mut rng, &[dc.bev_channels(), 3, 3], -1.0, 1.0);
    out.push(module_case("dense_head", seed, &s, vec![bev], fault, |g, v, p| {
        let (cls, reg) = detector::dense_head(g, p, v[0])?;
        g.concat_axis(&[cls, reg], 0)
    })?);
    let pooled = rand_tensor(&mut rng, &[dc.bev_channels() * 4, 3], -1.0, 1.0);
    out.push(module_case("local_align", seed, &s, vec![pooled], fault, |g, v, p| {
        detector::local_align_offsets(g, p, v[0])
    })?);

    // Objective terms, with residuals kept away from the smooth-L1 kink.
    let away = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let m = if rng.random_bool(0.5) { rng.random_range(0.1..0.8) } else { rng.random_range(1.2..3.0) };
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect()
    };
    let gt = rand_tensor(&mut rng, &[3, 4], 2.0, 6.0);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let pred_init = Tensor::new(vec![3, 4], gt.data().iter().zip(away(&mut rng, 12)).map(|(a, b)| a + b).collect())?;
    let pred_ref = Tensor::new(vec![3, 4], gt.data().iter().zip(away(&mut rng, 12)).map(|(a, b)| a + b).collect())?;
    for (k, name) in ["depth_init", "depth_refine"].iter().enumerate() {
        let gt = gt.clone();
        let mask = mask.clone();
        let pred = if k == 0 { pred_init.clone() } else { pred_ref.clone() };
        out.push(module_case(&format!("loss.{name}"), seed, &empty, vec![pred.clone(), pred], fault, move |g, v, _| {
            let (a, b) = losses::depth_losses(g, v[0], v[1], &gt, &mask)?;
            Ok(if k == 0 { a } else { b })
        })?);
    }
    let heat = rand_tensor(&mut rng, &[2, 3, 4], 0.0, 1.0);
    let aux = rand_tensor(&mut rng, &[2, 3, 4], -3.0, 3.0);
    out.push(module_case("loss.aux_2d", seed, &empty, vec![aux], fault, move |g, v, _| {
        losses::aux_2d_loss(g, v[0], &heat)
    })?);
    let labels: Vec<AnchorLabel> = (0..16)
        .map(|i| match i % 4 {
            0 => AnchorLabel::Positive,
            3 => AnchorLabel::Ignore,
            _ => AnchorLabel::Negative,
        })
        .collect();
    let cls = rand_tensor(&mut rng, &[16], -3.0, 3.0);
    out.push(module_case("loss.cls", seed, &empty, vec![cls], fault, move |g, v, _| {
        losses::focal_cls_loss(g, v[0], &labels, FOCAL_ALPHA, FOCAL_GAMMA)
    })?);
    for name in ["reg_global", "reg_local"] {
        let target = rand_tensor(&mut rng, &[7, 3], -1.0, 1.0);
        let pred = Tensor::new(vec![7, 3], target.data().iter().zip(away(&mut rng, 21)).map(|(a, b)| a + b).collect())?;
        out.push(module_case(&format!("loss.{name}"), seed, &empty, vec![pred], fault, move |g, v, _| {
            losses::box_regression_loss(g, v[0], &target)
        })?);
    }
    Ok(out)
}

/// Primitive checks followed by module and objective checks.
pub fn full_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckEntry>> {
    let mut out: Vec<CheckEntry> = primitive_suite(seed, 10, fault)?
        .into_iter()
        .map(|(k, e)| CheckEntry {
            path: format!("primitive.{}", k.name()),
            rel_error: e,
        })
        .collect();
    out.extend(module_suite(seed, fault)?);
    Ok(out)
}
