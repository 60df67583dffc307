//! Depth distributions from the plane-sweep volume, their semantic-guided
//! neighborhood refinement, depth-warped channel attention on semantic
//! features, and the voxel volumes built from both.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::stereo::{push_multilinear, DepthGrid, FeatureGeometry};
use crate::tensor::{BoundParams, Graph, ParamStore, SampleTaps, Tensor, Var};

/// Pixel offsets `(du, dv)` whose depth hypotheses compete during refinement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborPattern {
    pub offsets: Vec<(i32, i32)>,
}

impl Default for NeighborPattern {
    /// Center plus the 4-connected neighbors.
    fn default() -> Self {
        NeighborPattern {
            offsets: vec![(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)],
        }
    }
}

impl NeighborPattern {
    pub fn center() -> Self {
        NeighborPattern {
            offsets: vec![(0, 0)],
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = self.offsets.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.offsets.len() || !self.offsets.contains(&(0, 0)) {
            return Err(Error::invalid(format!(
                "neighbor offsets must be distinct and include (0, 0): {:?}",
                self.offsets
            )));
        }
        Ok(())
    }

    /// Neighbor `m` of `(u, v)`, clamped to the image.
    pub fn neighbor(&self, m: usize, u: usize, v: usize, w: usize, h: usize) -> (usize, usize) {
        let (du, dv) = self.offsets[m];
        let un = (u as i64 + du as i64).clamp(0, w as i64 - 1) as usize;
        let vn = (v as i64 + dv as i64).clamp(0, h as i64 - 1) as usize;
        (un, vn)
    }
}

pub const REDUCE: [&str; 2] = ["depth.reduce0", "depth.reduce1"];
pub const ATTN_Q: &str = "attn.q";
pub const ATTN_K: &str = "attn.k";
pub const ATTN_V: &str = "attn.v";
pub const ATTN_OUT: &str = "attn.out";
pub const ATTN_ALPHA: &str = "attn.alpha";
pub const ATTN_MLP: [&str; 2] = ["attn.mlp0", "attn.mlp1"];
pub const FUSION: &str = "fusion";

/// Learnables of the depth reduction, channel attention and fusion for
/// `c`-channel features.
pub fn init_weights(store: &mut ParamStore, seed: u64, c: usize) -> Result<()> {
    let mid = (c / 2).max(1);
    nn::add_conv(store, seed, REDUCE[0], mid, 2 * c, &[3, 3, 3])?;
    nn::add_conv(store, seed, REDUCE[1], 1, mid, &[3, 3, 3])?;
    for name in [ATTN_Q, ATTN_K, ATTN_V, ATTN_OUT] {
        nn::add_linear(store, seed, name, c, c)?;
    }
    store.insert(ATTN_ALPHA, Tensor::full(vec![1, 1], (c as f64).sqrt()))?;
    nn::add_linear(store, seed, ATTN_MLP[0], 2 * c, c)?;
    nn::add_linear(store, seed, ATTN_MLP[1], c, 2 * c)?;
    nn::add_conv(store, seed, FUSION, c, 3 * c, &[3, 3, 3])
}

/// Softmax over the leading depth axis of (D, H', W') logits.
pub fn depth_probability_from_logits(g: &mut Graph, logits: Var) -> Result<Var> {
    g.softmax_axis(logits, 0)
}

/// Two 3-D convolutions reduce the (2C, D, H', W') volume to one channel,
/// then softmax along depth: (D, H', W').
pub fn depth_probability(g: &mut Graph, p: &BoundParams, psv: Var) -> Result<Var> {
    let h = nn::conv3d(g, p, REDUCE[0], psv, [1; 3], [1; 3])?;
    let h = g.relu(h)?;
    let logits = nn::conv3d(g, p, REDUCE[1], h, [1; 3], [1; 3])?;
    let s = g.shape(logits)[1..].to_vec();
    let logits = g.reshape(logits, &s)?;
    depth_probability_from_logits(g, logits)
}

/// Negative sum of absolute differences between the two halves of a
/// (2C, D, H', W') plane-sweep volume, a fixed matching cost as (D, H', W').
pub fn negative_sad_logits(psv: &Tensor) -> Result<Tensor> {
    let s = psv.shape();
    if s.len() != 4 || !s[0].is_multiple_of(2) {
        return Err(Error::shape("negative_sad", format!("{s:?}")));
    }
    let c = s[0] / 2;
    let n = s[1] * s[2] * s[3];
    let x = psv.data();
    let mut out = vec![0.0; n];
    for ch in 0..c {
        let l = &x[ch * n..(ch + 1) * n];
        let r = &x[(ch + c) * n..(ch + c + 1) * n];
        for (o, (a, b)) in out.iter_mut().zip(l.iter().zip(r)) {
            *o -= (a - b).abs();
        }
    }
    Tensor::new(s[1..].to_vec(), out)
}

fn depth_column(g: &mut Graph, grid: &DepthGrid, shape: &[usize]) -> Result<Var> {
    let d = g.constant(Tensor::new(vec![grid.levels, 1, 1], grid.depths())?);
    g.broadcast(d, shape)
}

/// Expected depth `Σ_w P(w)·d(w)` of a (D, H', W') distribution: (H', W').
pub fn expected_depth(g: &mut Graph, prob: Var, grid: &DepthGrid) -> Result<Var> {
    let shape = g.shape(prob).to_vec();
    if shape.first() != Some(&grid.levels) {
        return Err(Error::shape("expected_depth", format!("{shape:?} vs {} levels", grid.levels)));
    }
    let d = depth_column(g, grid, &shape)?;
    let wd = g.mul(prob, d)?;
    g.sum_axis(wd, 0)
}

/// Per-pixel variance `Σ_w P(w)·(d(w) − mean)²`: (H', W').
pub fn depth_variance(g: &mut Graph, prob: Var, mean: Var, grid: &DepthGrid) -> Result<Var> {
    let shape = g.shape(prob).to_vec();
    let d = depth_column(g, grid, &shape)?;
    let m = g.reshape(mean, &[1, shape[1], shape[2]])?;
    let m = g.broadcast(m, &shape)?;
    let diff = g.sub(d, m)?;
    let sq = g.mul(diff, diff)?;
    let wsq = g.mul(prob, sq)?;
    g.sum_axis(wsq, 0)
}

/// Integer gather of each pixel's (clamped) neighbors: (H', W') -> (M, H', W').
pub fn neighbor_taps(pattern: &NeighborPattern, h: usize, w: usize) -> Result<SampleTaps> {
    pattern.validate()?;
    let mut b = SampleTaps::builder(h * w, vec![pattern.len(), h, w]);
    for m in 0..pattern.len() {
        for v in 0..h {
            for u in 0..w {
                let (un, vn) = pattern.neighbor(m, u, v, w, h);
                b.push(vn * w + un, 1.0);
                b.end_row();
            }
        }
    }
    b.finish()
}

/// Taps sampling right features at the disparity implied by each neighbor's
/// (detached) depth: (H', W') -> (M, H', W').
pub fn neighbor_disparity_taps(fg: &FeatureGeometry, depth: &[f64], pattern: &NeighborPattern) -> Result<SampleTaps> {
    pattern.validate()?;
    let (h, w) = (fg.height(), fg.width());
    if depth.len() != h * w {
        return Err(Error::shape("semantic_similarity", format!("{} depths for {h}x{w}", depth.len())));
    }
    let mut b = SampleTaps::builder(h * w, vec![pattern.len(), h, w]);
    for m in 0..pattern.len() {
        for v in 0..h {
            for u in 0..w {
                let (un, vn) = pattern.neighbor(m, u, v, w, h);
                let z = depth[vn * w + un];
                if z.is_finite() && z > 0.0 {
                    push_multilinear(&mut b, v * w, &[u as f64 - fg.disparity(z)], &[w]);
                }
                b.end_row();
            }
        }
    }
    b.finish()
}

/// `S_m(u, v) = <F_L(u, v), F_R(u − disp(D(neighbor m)), v)>`: (M, H', W').
pub fn semantic_similarity(g: &mut Graph, left: Var, right: Var, taps: Arc<SampleTaps>) -> Result<Var> {
    let s = g.shape(left).to_vec();
    if s.len() != 3 || g.shape(right) != s.as_slice() {
        return Err(Error::shape("semantic_similarity", format!("{s:?} vs {:?}", g.shape(right))));
    }
    let m = taps.out_shape()[0];
    let rs = g.sample(right, taps)?;
    let l4 = g.reshape(left, &[s[0], 1, s[1], s[2]])?;
    let lb = g.broadcast(l4, &[s[0], m, s[1], s[2]])?;
    let prod = g.mul(lb, rs)?;
    g.sum_axis(prod, 0)
}

/// Depth variance gathered at each neighbor: (M, H', W').
pub fn depth_confidence(g: &mut Graph, prob: Var, mean: Var, grid: &DepthGrid, neighbors: Arc<SampleTaps>) -> Result<Var> {
    let var = depth_variance(g, prob, mean, grid)?;
    let s = g.shape(var).to_vec();
    let v1 = g.reshape(var, &[1, s[0], s[1]])?;
    let gathered = g.sample(v1, neighbors)?;
    let out = g.shape(gathered)[1..].to_vec();
    g.reshape(gathered, &out)
}

/// `P̃(w) = Σ_m P_{neighbor m}(w)·softmax_m(S_m·sigmoid(C_m))`: (D, H', W').
pub fn refine_depth_probability(g: &mut Graph, prob: Var, sim: Var, conf: Var, neighbors: Arc<SampleTaps>) -> Result<Var> {
    let ps = g.shape(prob).to_vec();
    let ms = g.shape(sim).to_vec();
    if ms.len() != 3 || g.shape(conf) != ms.as_slice() || ms[1..] != ps[1..] {
        return Err(Error::shape(
            "refine_depth_probability",
            format!("P {ps:?}, S {ms:?}, C {:?}", g.shape(conf)),
        ));
    }
    let gate = g.sigmoid(conf)?;
    let logits = g.mul(sim, gate)?;
    let attn = g.softmax_axis(logits, 0)?;
    let pn = g.sample(prob, neighbors)?;
    let a4 = g.reshape(attn, &[1, ms[0], ms[1], ms[2]])?;
    let ab = g.broadcast(a4, &[ps[0], ms[0], ms[1], ms[2]])?;
    let weighted = g.mul(pn, ab)?;
    g.sum_axis(weighted, 1)
}

/// Channel-as-token attention between left features and warped right
/// features, with residual MLP: (C, H', W') -> (C, H', W').
pub fn enhance_semantic(g: &mut Graph, p: &BoundParams, left: Var, right_warped: Var) -> Result<Var> {
    let s = g.shape(left).to_vec();
    if s.len() != 3 || g.shape(right_warped) != s.as_slice() {
        return Err(Error::shape("enhance_semantic", format!("{s:?} vs {:?}", g.shape(right_warped))));
    }
    let alpha = p.get(ATTN_ALPHA)?;
    if g.value(alpha).data().contains(&0.0) {
        return Err(Error::invalid("attention temperature is zero"));
    }
    let (c, n) = (s[0], s[1] * s[2]);
    let fl = g.reshape(left, &[c, n])?;
    let fr = g.reshape(right_warped, &[c, n])?;
    let q = nn::linear(g, p, ATTN_Q, fl)?;
    let k = nn::linear(g, p, ATTN_K, fr)?;
    let v = nn::linear(g, p, ATTN_V, fr)?;
    let kt = g.transpose(k)?;
    let qk = g.matmul(q, kt)?;
    let ab = g.broadcast(alpha, &[c, c])?;
    let scaled = g.div(qk, ab)?;
    let attn = g.softmax_axis(scaled, 1)?;
    let av = g.matmul(attn, v)?;
    let proj = nn::linear(g, p, ATTN_OUT, av)?;
    let agg = g.add(fl, proj)?;
    let h = nn::linear(g, p, ATTN_MLP[0], agg)?;
    let h = g.relu(h)?;
    let mlp = nn::linear(g, p, ATTN_MLP[1], h)?;
    let out = g.add(agg, mlp)?;
    let out = g.add(out, fl)?;
    g.reshape(out, &s)
}

/// Image features at each voxel's projection masked by the depth
/// probability there: (C, Y, Z, X).
pub fn semantic_3d_volume(g: &mut Graph, feat: Var, prob: Var, image: Arc<SampleTaps>, lift: Arc<SampleTaps>) -> Result<Var> {
    let fv = g.sample(feat, image)?;
    let ps = g.shape(prob).to_vec();
    let mut p1 = vec![1];
    p1.extend_from_slice(&ps);
    let p4 = g.reshape(prob, &p1)?;
    let pv = g.sample(p4, lift)?;
    let shape = g.shape(fv).to_vec();
    let pb = g.broadcast(pv, &shape)?;
    g.mul(fv, pb)
}

/// Plane-sweep features lifted onto voxel centers: (2C, Y, Z, X).
pub fn geometric_3d_volume(g: &mut Graph, psv: Var, lift: Arc<SampleTaps>) -> Result<Var> {
    g.sample(psv, lift)
}

/// Channel concatenation, 3-D convolution and ReLU: (C, Y, Z, X).
pub fn fuse_voxels(g: &mut Graph, p: &BoundParams, geo: Var, sem: Var) -> Result<Var> {
    let (gs, ss) = (g.shape(geo).to_vec(), g.shape(sem).to_vec());
    if gs.len() != 4 || ss.len() != 4 || gs[1..] != ss[1..] {
        return Err(Error::shape("fuse_voxels", format!("{gs:?} vs {ss:?}")));
    }
    let cat = g.concat_axis(&[geo, sem], 0)?;
    let y = nn::conv3d(g, p, FUSION, cat, [1; 3], [1; 3])?;
    g.relu(y)
}
