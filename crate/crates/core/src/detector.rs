//! Height collapse to BEV, anchor-based dense head, NMS, and per-box ROI
//! pooling with a local alignment MLP.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::boxes::{decode_box, Box7, BoxOffset, Class, Detection};
use crate::error::{Error, Result};
use crate::eval::rotated_iou_bev;
use crate::nn;
use crate::stereo::DetectionGrid;
use crate::tensor::{BoundParams, Graph, ParamStore, Regions, Tensor, Var};

pub const NUM_CLASSES: usize = 2;
/// Orientations per class.
pub const ORIENTATIONS: [f64; 2] = [0.0, FRAC_PI_2];
pub const ANCHORS_PER_CELL: usize = NUM_CLASSES * ORIENTATIONS.len();

pub const COLLAPSE: &str = "bev.collapse";
pub const SEM_COLLAPSE: &str = "bev.sem_collapse";
pub const HEAD_CONV: &str = "head.conv";
pub const HEAD_CLS: &str = "head.cls";
pub const HEAD_REG: &str = "head.reg";
pub const ALIGN: [&str; 2] = ["align.fc0", "align.fc1"];

/// Logit bias giving an initial foreground probability of 1%.
const PRIOR_LOGIT: f64 = -4.595_119_850_134_59;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Voxel feature channels entering the collapse.
    pub voxel_channels: usize,
    /// Channels per collapsed height slice.
    pub collapse_channels: usize,
    /// Height extent Y of the detection grid.
    pub height_cells: usize,
    pub roi_k: usize,
    pub align_hidden: usize,
}

impl DetectorConfig {
    /// Height slices left after the stride-2 collapse.
    pub fn collapsed_height(&self) -> usize {
        (self.height_cells + 2 - 3) / 2 + 1
    }

    pub fn bev_channels(&self) -> usize {
        self.collapse_channels * self.collapsed_height()
    }
}

fn scaled(store: &mut ParamStore, name: &str, s: f64) {
    if let Some(t) = store.get_mut(&format!("{name}.weight")) {
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

pub fn init_weights(store: &mut ParamStore, seed: u64, cfg: &DetectorConfig) -> Result<()> {
    let c = cfg.bev_channels();
    nn::add_conv(store, seed, COLLAPSE, cfg.collapse_channels, cfg.voxel_channels, &[3, 3, 3])?;
    nn::add_conv(store, seed, SEM_COLLAPSE, cfg.collapse_channels, cfg.voxel_channels, &[3, 3, 3])?;
    nn::add_conv(store, seed, HEAD_CONV, c, c, &[3, 3])?;
    nn::add_conv(store, seed, HEAD_CLS, ANCHORS_PER_CELL * NUM_CLASSES, c, &[1, 1])?;
    store
        .get_mut(&format!("{HEAD_CLS}.bias"))
        .expect("just inserted")
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = PRIOR_LOGIT);
    nn::add_conv(store, seed, HEAD_REG, ANCHORS_PER_CELL * 7, c, &[1, 1])?;
    scaled(store, HEAD_REG, 0.1);
    let k2 = cfg.roi_k * cfg.roi_k;
    nn::add_linear(store, seed, ALIGN[0], cfg.align_hidden, c * k2)?;
    nn::add_linear(store, seed, ALIGN[1], 7, cfg.align_hidden)?;
    scaled(store, ALIGN[1], 0.1);
    Ok(())
}

/// (C, Y, Z, X) voxels -> (C'·Y/2, Z, X) BEV through a height-strided
/// convolution, ReLU and reshape.
pub fn bev_collapse(g: &mut Graph, p: &BoundParams, name: &str, voxels: Var) -> Result<Var> {
    let s = g.shape(voxels).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("bev_collapse", format!("{s:?}")));
    }
    let y = nn::conv3d(g, p, name, voxels, [2, 1, 1], [1, 1, 1])?;
    let y = g.relu(y)?;
    let ys = g.shape(y).to_vec();
    g.reshape(y, &[ys[0] * ys[1], ys[2], ys[3]])
}

/// BEV -> (logits (A·K, Z, X), offsets (A·7, Z, X)). Channel `a·K + k` is
/// class `k` of anchor slot `a`; channel `a·7 + j` is offset component `j`.
pub fn dense_head(g: &mut Graph, p: &BoundParams, bev: Var) -> Result<(Var, Var)> {
    let h = nn::conv2d(g, p, HEAD_CONV, bev, 1, 1)?;
    let h = g.relu(h)?;
    let cls = nn::conv2d(g, p, HEAD_CLS, h, 1, 0)?;
    let reg = nn::conv2d(g, p, HEAD_REG, h, 1, 0)?;
    Ok((cls, reg))
}

/// Class-specific anchor templates at every BEV cell center.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub nx: usize,
    pub nz: usize,
    /// Indexed by [`AnchorSet::id`].
    pub boxes: Vec<Box7>,
}

impl AnchorSet {
    pub fn new(grid: &DetectionGrid) -> Self {
        let [nx, _, nz] = grid.extents();
        let mut boxes = Vec::with_capacity(ANCHORS_PER_CELL * nx * nz);
        for a in 0..ANCHORS_PER_CELL {
            let t = Self::slot_class(a).template();
            for k in 0..nz {
                for i in 0..nx {
                    boxes.push(Box7 {
                        x: grid.center_x(i),
                        z: grid.center_z(k),
                        yaw: ORIENTATIONS[a % ORIENTATIONS.len()],
                        ..t
                    });
                }
            }
        }
        AnchorSet { nx, nz, boxes }
    }

    pub fn slot_class(slot: usize) -> Class {
        Class::ALL[slot / ORIENTATIONS.len()]
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn id(&self, slot: usize, z: usize, x: usize) -> usize {
        (slot * self.nz + z) * self.nx + x
    }

    /// `(slot, z, x)` of an anchor id.
    pub fn cell(&self, id: usize) -> (usize, usize, usize) {
        let cells = self.nz * self.nx;
        (id / cells, (id % cells) / self.nx, id % self.nx)
    }

    pub fn class(&self, id: usize) -> Class {
        Self::slot_class(id / (self.nz * self.nx))
    }

    /// Flat index of anchor `id`'s own-class logit in the (A·K, Z, X) map.
    pub fn logit_index(&self, id: usize) -> usize {
        let (slot, z, x) = self.cell(id);
        let ch = slot * NUM_CLASSES + self.class(id).index();
        (ch * self.nz + z) * self.nx + x
    }

    /// Offsets of anchor `id` read from an (A·7, Z, X) map.
    pub fn offsets(&self, reg: &Tensor, id: usize) -> BoxOffset {
        let (slot, z, x) = self.cell(id);
        std::array::from_fn(|j| reg.at(&[slot * 7 + j, z, x]))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Every anchor decoded with its own-class score, as `(anchor id, detection)`.
pub fn decode_all(anchors: &AnchorSet, cls: &Tensor, reg: &Tensor, t_us: i64) -> Vec<(usize, Detection)> {
    (0..anchors.len())
        .map(|id| {
            let d = Detection {
                t_us,
                class: anchors.class(id),
                score: sigmoid(cls.data()[anchors.logit_index(id)]),
                bbox: decode_box(&anchors.boxes[id], &anchors.offsets(reg, id)),
            };
            (id, d)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub max_out: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.5,
            score_threshold: 0.3,
            max_out: 100,
        }
    }
}

/// Greedy class-wise suppression in (score desc, x asc, z asc) order.
/// Returns indices into `dets` of the survivors, in that order.
pub fn nms_bev(dets: &[Detection], cfg: &NmsConfig) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= cfg.score_threshold).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.bbox.x.total_cmp(&db.bbox.x))
            .then(da.bbox.z.total_cmp(&db.bbox.z))
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= cfg.max_out {
            break;
        }
        let mut suppressed = false;
        for &k in &keep {
            if dets[k].class == dets[i].class && rotated_iou_bev(&dets[k].bbox, &dets[i].bbox)? > cfg.iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// k×k sub-cell membership of BEV cell centers inside each box footprint.
/// Region `s·n + b` holds cells of sub-cell `s` (length-major) of box `b`,
/// indexing positions `z·X + x`.
pub fn roi_regions(grid: &DetectionGrid, boxes: &[Box7], k: usize) -> Result<Regions> {
    if k == 0 {
        return Err(Error::invalid("ROI grid size must be at least 1"));
    }
    let [nx, _, nz] = grid.extents();
    let n = boxes.len();
    let mut sets = vec![Vec::new(); k * k * n];
    for (b, bx) in boxes.iter().enumerate() {
        let r = 0.5 * bx.l.hypot(bx.w);
        let i_lo = ((bx.x - r - grid.x_range[0]) / grid.voxel).floor().max(0.0) as usize;
        let i_hi = (((bx.x + r - grid.x_range[0]) / grid.voxel).ceil().max(0.0) as usize).min(nx);
        let k_lo = ((bx.z - r - grid.z_range[0]) / grid.voxel).floor().max(0.0) as usize;
        let k_hi = (((bx.z + r - grid.z_range[0]) / grid.voxel).ceil().max(0.0) as usize).min(nz);
        for kz in k_lo..k_hi {
            for ix in i_lo..i_hi {
                if let Some(s) = sub_cell(bx, grid.center_x(ix), grid.center_z(kz), k) {
                    sets[s * n + b].push(kz * nx + ix);
                }
            }
        }
    }
    Ok(Regions { n_in: nx * nz, sets })
}

/// Sub-cell of `(x, z)` within the box footprint, if inside.
pub fn sub_cell(bx: &Box7, x: f64, z: f64, k: usize) -> Option<usize> {
    if !bx.bev_contains(x, z) {
        return None;
    }
    let (a, c) = bx.to_local(x, z);
    let idx = |t: f64, ext: f64| (((t / ext + 0.5) * k as f64).floor() as usize).min(k - 1);
    Some(idx(a, bx.l) * k + idx(c, bx.w))
}

/// Max-pooled semantic BEV per box: (C', Z, X) -> (C'·k², n) with row
/// `c·k² + s` for channel `c` and sub-cell `s`.
pub fn roi_bev_pool(g: &mut Graph, bev: Var, regions: &Regions, k: usize) -> Result<Var> {
    let s = g.shape(bev).to_vec();
    let flat = g.reshape(bev, &[s[0], s[1] * s[2]])?;
    let pooled = g.max_pool_region(flat, regions)?;
    let n = regions.sets.len() / (k * k);
    g.reshape(pooled, &[s[0] * k * k, n])
}

/// Alignment offsets (7, n) predicted from pooled features (C'·k², n).
pub fn local_align_offsets(g: &mut Graph, p: &BoundParams, pooled: Var) -> Result<Var> {
    let h = nn::linear(g, p, ALIGN[0], pooled)?;
    let h = g.relu(h)?;
    nn::linear(g, p, ALIGN[1], h)
}

/// Applies column `b` of a (7, n) offset tensor to each box.
pub fn local_align(boxes: &[Box7], offsets: &Tensor) -> Vec<Box7> {
    let n = boxes.len();
    boxes
        .iter()
        .enumerate()
        .map(|(b, bx)| decode_box(bx, &std::array::from_fn(|j| offsets.data()[j * n + b])))
        .collect()
}
