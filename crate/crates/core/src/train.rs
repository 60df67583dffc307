//! One-sample loss graphs and the AdamW training loop.

use std::sync::Arc;

use crate::boxes::{decode_box, encode_box, Box7};
use crate::error::{Error, Result};
use crate::eval::GtBox;
use crate::event::VoxelGrid;
use crate::losses::{self, LossBreakdown, LossTerms, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::model::Model;
use crate::targets;
use crate::tensor::{AdamW, AdamWState, Graph, ParamStore, SampleTaps, Tensor};

/// Stereo input at one instant with its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub t_us: i64,
    pub left: VoxelGrid,
    pub right: VoxelGrid,
    pub gts: Vec<GtBox>,
}

/// A loss graph ready for backward, with the trainable handles in store order.
pub struct LossGraph {
    pub graph: Graph,
    pub total: crate::tensor::Var,
    pub breakdown: LossBreakdown,
    pub params: Vec<crate::tensor::Var>,
}

fn residual_tensor(rows: &[BoxOffset7]) -> Tensor {
    let n = rows.len();
    Tensor::from_fn(vec![7, n], |i| rows[i % n][i / n])
}

type BoxOffset7 = [f64; 7];

pub fn build_loss(model: &Model, params: &ParamStore, sample: &Sample) -> Result<LossGraph> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let f = model.forward(&mut g, &p, &sample.left, &sample.right)?;
    let cfg = &model.config;

    let (dgt, dmask) = targets::depth_targets(&model.geom, &cfg.depth, &sample.gts);
    let (l_init, l_ref) = losses::depth_losses(&mut g, f.depth_init, f.depth_refined, &dgt, &dmask)?;

    let heat = targets::center_heatmap(&model.geom, &sample.gts);
    let l_aux = losses::aux_2d_loss(&mut g, f.aux_logits, &heat)?;

    let at = targets::assign_anchors(&model.anchors, &sample.gts)?;
    let labels = at.logit_labels(&model.anchors);
    let l_cls = losses::focal_cls_loss(&mut g, f.cls, &labels, FOCAL_ALPHA, FOCAL_GAMMA)?;

    // Predicted residuals of the positive anchors, gathered to (7, P).
    let reg_val = g.value(f.reg).clone();
    let npos = at.positives.len();
    let (l_glob, l_loc) = if npos == 0 {
        let z = g.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let nreg = reg_val.numel();
        let mut b = SampleTaps::builder(nreg, vec![7, npos]);
        for j in 0..7 {
            for &(id, _, _) in &at.positives {
                let (slot, z, x) = model.anchors.cell(id);
                b.push(reg_val.offset(&[slot * 7 + j, z, x]), 1.0);
                b.end_row();
            }
        }
        let flat = g.reshape(f.reg, &[1, nreg])?;
        let picked = g.sample(flat, Arc::new(b.finish()?))?;
        let picked = g.reshape(picked, &[7, npos])?;
        let gt_res: Vec<BoxOffset7> = at.positives.iter().map(|p| p.2).collect();
        let l_glob = losses::box_regression_loss(&mut g, picked, &residual_tensor(&gt_res))?;

        // Local alignment against detached global predictions.
        let mut boxes: Vec<Box7> = Vec::new();
        let mut local_res: Vec<BoxOffset7> = Vec::new();
        for &(id, j, _) in &at.positives {
            let pg = decode_box(&model.anchors.boxes[id], &model.anchors.offsets(&reg_val, id));
            if let Ok(r) = encode_box(&pg, &sample.gts[j].bbox) {
                boxes.push(pg);
                local_res.push(r);
            }
        }
        let l_loc = if boxes.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let off = model.align_offsets(&mut g, &p, f.bev_sem, &boxes)?;
            losses::box_regression_loss(&mut g, off, &residual_tensor(&local_res))?
        };
        (l_glob, l_loc)
    };

    let terms = LossTerms([l_init, l_ref, l_aux, l_cls, l_glob, l_loc]);
    let (total, breakdown) = losses::total_loss(&mut g, &terms)?;
    Ok(LossGraph {
        graph: g,
        total,
        breakdown,
        params: p.vars().to_vec(),
    })
}

/// Loss values and parameter gradients (store order) for one sample.
pub fn loss_and_grads(model: &Model, params: &ParamStore, sample: &Sample) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let lg = build_loss(model, params, sample)?;
    if let Some(name) = lg.breakdown.non_finite() {
        return Err(Error::NonFinite(format!("loss component {name}")));
    }
    let grads = lg.graph.backward(lg.total)?;
    Ok((lg.breakdown, lg.params.iter().map(|&v| grads.wrt(v)).collect()))
}

/// `steps` AdamW updates cycling through `samples` in order; `on_step`
/// sees each step's pre-update losses.
pub fn train(
    model: &Model,
    params: &mut ParamStore,
    samples: &[Sample],
    opt: AdamW,
    steps: usize,
    mut on_step: impl FnMut(usize, &LossBreakdown) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() && steps > 0 {
        return Err(Error::invalid("no training samples"));
    }
    let mut state = AdamWState::new(opt, params);
    for step in 0..steps {
        let (b, grads) = loss_and_grads(model, params, &samples[step % samples.len()])?;
        on_step(step, &b)?;
        state.step(params, &grads)?;
    }
    Ok(())
}
