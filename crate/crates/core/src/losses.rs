//! Training objective: depth, auxiliary heatmap, classification and box
//! regression terms, summed without weights.
//!
//! Piecewise and selection structure (smooth-L1 branch, labels, masks) is
//! fixed from current values as graph constants; gradients flow through the
//! selected pieces only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Σ_i coeff_i · x_i as a scalar.
fn weighted_sum(g: &mut Graph, x: Var, coeff: Vec<f64>) -> Result<Var> {
    let c = g.constant(Tensor::new(g.shape(x).to_vec(), coeff)?);
    let p = g.mul(x, c)?;
    g.sum_all(p)
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Elementwise smooth-L1 weighted by `weights`, normalized by `norm`.
fn smooth_l1_weighted(g: &mut Graph, pred: Var, target: Var, beta: f64, weights: &[f64], norm: f64) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("smooth-L1 beta must be positive, got {beta}")));
    }
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(
            "smooth_l1",
            format!("{:?} vs {:?}", g.shape(pred), g.shape(target)),
        ));
    }
    if norm == 0.0 {
        return Ok(zero(g));
    }
    let x = g.sub(pred, target)?;
    let xv = g.value(x).data().to_vec();
    let mut quad = Vec::with_capacity(xv.len());
    let mut lin = Vec::with_capacity(xv.len());
    let mut offset = 0.0;
    for (&v, &w) in xv.iter().zip(weights) {
        let w = w / norm;
        if v.abs() < beta {
            quad.push(0.5 * w / beta);
            lin.push(0.0);
        } else {
            quad.push(0.0);
            lin.push(w * v.signum());
            offset += 0.5 * beta * w;
        }
    }
    let sq = g.mul(x, x)?;
    let q = weighted_sum(g, sq, quad)?;
    let l = weighted_sum(g, x, lin)?;
    let s = g.add(q, l)?;
    let off = g.constant(Tensor::scalar(-offset));
    g.add(s, off)
}

/// Mean smooth-L1 over all elements.
pub fn smooth_l1(g: &mut Graph, pred: Var, target: Var, beta: f64) -> Result<Var> {
    let n = g.value(pred).numel();
    smooth_l1_weighted(g, pred, target, beta, &vec![1.0; n], n as f64)
}

/// Mean smooth-L1 over the elements where `mask` is set; zero when empty.
pub fn masked_smooth_l1(g: &mut Graph, pred: Var, target: Var, mask: &[bool], beta: f64) -> Result<Var> {
    if mask.len() != g.value(pred).numel() {
        return Err(Error::shape("masked_smooth_l1", format!("mask of {} for {:?}", mask.len(), g.shape(pred))));
    }
    let w: Vec<f64> = mask.iter().map(|&m| m as u8 as f64).collect();
    let n = w.iter().sum();
    smooth_l1_weighted(g, pred, target, beta, &w, n)
}

/// Initial and refined depth losses against `gt` on `mask`.
pub fn depth_losses(g: &mut Graph, init: Var, refined: Var, gt: &Tensor, mask: &[bool]) -> Result<(Var, Var)> {
    let t = g.constant(gt.clone());
    Ok((
        masked_smooth_l1(g, init, t, mask, SMOOTH_L1_BETA)?,
        masked_smooth_l1(g, refined, t, mask, SMOOTH_L1_BETA)?,
    ))
}

/// Sigmoid focal loss with soft targets `t ∈ [0, 1]` and per-element
/// weights (0 = ignore), normalized by the total weight:
/// `α·t·(1−p)^γ·(−ln p) + (1−α)(1−t)·p^γ·(−ln(1−p))`.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[f64], weights: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    let n = g.value(logits).numel();
    if targets.len() != n || weights.len() != n {
        return Err(Error::shape("focal_loss", format!("{n} logits, {} targets, {} weights", targets.len(), weights.len())));
    }
    let norm: f64 = weights.iter().sum();
    if norm == 0.0 {
        return Ok(zero(g));
    }
    let neg_x = g.scalar_mul(logits, -1.0)?;
    let sp_pos = g.softplus(logits)?; // −ln(1−p)
    let sp_neg = g.softplus(neg_x)?; // −ln p
    let e_pos = g.scalar_mul(sp_pos, -gamma)?;
    let one_minus_p_g = g.exp(e_pos)?; // (1−p)^γ
    let e_neg = g.scalar_mul(sp_neg, -gamma)?;
    let p_g = g.exp(e_neg)?; // p^γ
    let pos = g.mul(one_minus_p_g, sp_neg)?;
    let neg = g.mul(p_g, sp_pos)?;
    let cp = targets.iter().zip(weights).map(|(t, w)| alpha * t * w / norm).collect();
    let cn = targets.iter().zip(weights).map(|(t, w)| (1.0 - alpha) * (1.0 - t) * w / norm).collect();
    let a = weighted_sum(g, pos, cp)?;
    let b = weighted_sum(g, neg, cn)?;
    g.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Focal classification over per-class logits; `labels[i]` labels logit `i`.
pub fn focal_cls_loss(g: &mut Graph, logits: Var, labels: &[AnchorLabel], alpha: f64, gamma: f64) -> Result<Var> {
    let t: Vec<f64> = labels.iter().map(|&l| (l == AnchorLabel::Positive) as u8 as f64).collect();
    let w: Vec<f64> = labels.iter().map(|&l| (l != AnchorLabel::Ignore) as u8 as f64).collect();
    focal_loss(g, logits, &t, &w, alpha, gamma)
}

/// Focal loss of heatmap logits against a soft center heatmap, averaged
/// over all pixels.
pub fn aux_2d_loss(g: &mut Graph, logits: Var, heatmap: &Tensor) -> Result<Var> {
    if g.shape(logits) != heatmap.shape() {
        return Err(Error::shape("aux_2d_loss", format!("{:?} vs {:?}", g.shape(logits), heatmap.shape())));
    }
    let w = vec![1.0; heatmap.numel()];
    focal_loss(g, logits, heatmap.data(), &w, FOCAL_ALPHA, FOCAL_GAMMA)
}

/// Smooth-L1 between predicted and target residuals, both (7, n); zero when n = 0.
pub fn box_regression_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    if target.numel() == 0 {
        return Ok(zero(g));
    }
    let t = g.constant(target.clone());
    smooth_l1(g, pred, t, SMOOTH_L1_BETA)
}

/// Scalar values of the six objective terms and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub depth_init: f64,
    pub depth_refine: f64,
    pub aux_2d: f64,
    pub cls: f64,
    pub reg_global: f64,
    pub reg_local: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 6] = ["depth_init", "depth_refine", "aux_2d", "cls", "reg_global", "reg_local"];

    pub fn components(&self) -> [f64; 6] {
        [
            self.depth_init,
            self.depth_refine,
            self.aux_2d,
            self.cls,
            self.reg_global,
            self.reg_local,
        ]
    }

    /// First non-finite component, by name.
    pub fn non_finite(&self) -> Option<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.components())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

/// Graph handles of the six terms, in [`LossBreakdown::NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms(pub [Var; 6]);

/// Unweighted sum of the six terms, plus their values.
pub fn total_loss(g: &mut Graph, terms: &LossTerms) -> Result<(Var, LossBreakdown)> {
    let mut total = terms.0[0];
    for &t in &terms.0[1..] {
        total = g.add(total, t)?;
    }
    let v: Vec<f64> = terms.0.iter().map(|&t| g.value(t).item()).collect::<Result<_>>()?;
    let b = LossBreakdown {
        depth_init: v[0],
        depth_refine: v[1],
        aux_2d: v[2],
        cls: v[3],
        reg_global: v[4],
        reg_local: v[5],
        total: g.value(total).item()?,
    };
    Ok((total, b))
}
