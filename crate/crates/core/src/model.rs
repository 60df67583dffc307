//! The full stereo detection network: configuration, parameters, forward
//! pass and inference post-processing.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, FEATURE_STRIDE};
use crate::boxes::{Box7, Detection};
use crate::detector::{self, AnchorSet, DetectorConfig, NmsConfig, NUM_CLASSES};
use crate::dual_filter::{self as df, NeighborPattern};
use crate::error::{Error, Result};
use crate::event::VoxelGrid;
use crate::nn;
use crate::stereo::{self, DepthGrid, DetectionGrid, FeatureGeometry, StereoRig};
use crate::tensor::{BoundParams, Graph, ParamStore, SampleTaps, Var};

pub const AUX_HEAD: &str = "aux.head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub bins: usize,
    pub channels: usize,
    pub trunk_channels: [usize; 2],
    pub depth: DepthGrid,
    pub grid: DetectionGrid,
    pub neighbors: NeighborPattern,
    pub collapse_channels: usize,
    pub roi_k: usize,
    pub align_hidden: usize,
    pub nms: NmsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bins: 5,
            channels: 32,
            trunk_channels: [16, 32],
            depth: DepthGrid::default(),
            grid: DetectionGrid::default(),
            neighbors: NeighborPattern::default(),
            collapse_channels: 32,
            roi_k: 3,
            align_hidden: 64,
            nms: NmsConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration trainable in minutes on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            channels: 8,
            depth: DepthGrid::desk(),
            grid: DetectionGrid::desk(),
            collapse_channels: 8,
            align_hidden: 32,
            ..ModelConfig::default()
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            bins: self.bins,
            trunk_channels: self.trunk_channels,
            channels: self.channels,
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            voxel_channels: self.channels,
            collapse_channels: self.collapse_channels,
            height_cells: self.grid.extents()[1],
            roi_k: self.roi_k,
            align_hidden: self.align_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.depth.validate()?;
        self.grid.validate()?;
        self.neighbors.validate()?;
        if self.bins == 0 || self.channels < 2 || self.collapse_channels == 0 || self.roi_k == 0 || self.align_hidden == 0 {
            return Err(Error::invalid("model widths must be positive (channels at least 2)"));
        }
        Ok(())
    }

    /// Every learnable tensor, deterministically initialized from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut s = ParamStore::new();
        backbone::init_weights(&mut s, seed, &self.backbone())?;
        df::init_weights(&mut s, seed, self.channels)?;
        detector::init_weights(&mut s, seed, &self.detector())?;
        nn::add_conv(&mut s, seed, AUX_HEAD, NUM_CLASSES, self.channels, &[1, 1])?;
        Ok(s)
    }

    /// Rejects a parameter set whose names or shapes differ from this
    /// configuration's.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let want = self.init_params(0)?;
        if want.names() != params.names() {
            return Err(Error::Format(format!(
                "weights hold {} tensors, configuration expects {}",
                params.len(),
                want.len()
            )));
        }
        for ((name, a), (_, b)) in want.iter().zip(params.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", b.shape(), a.shape())));
            }
        }
        Ok(())
    }
}

/// Configuration plus all geometry-derived sampling plans.
pub struct Model {
    pub config: ModelConfig,
    pub geom: FeatureGeometry,
    pub anchors: AnchorSet,
    psv_taps: Arc<SampleTaps>,
    lift_taps: Arc<SampleTaps>,
    image_taps: Arc<SampleTaps>,
    neighbor_taps: Arc<SampleTaps>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub sem_left: Var,
    pub prob: Var,
    pub depth_init: Var,
    pub prob_refined: Var,
    pub depth_refined: Var,
    pub aux_logits: Var,
    pub cls: Var,
    pub reg: Var,
    pub bev_sem: Var,
}

impl Model {
    pub fn new(config: ModelConfig, rig: StereoRig) -> Result<Self> {
        config.validate()?;
        if !(rig.width as usize).is_multiple_of(FEATURE_STRIDE) || !(rig.height as usize).is_multiple_of(FEATURE_STRIDE) {
            return Err(Error::invalid(format!(
                "sensor {}x{} is not a multiple of the feature stride {FEATURE_STRIDE}",
                rig.width, rig.height
            )));
        }
        if !config.grid.extents()[1].is_multiple_of(2) {
            return Err(Error::invalid("detection grid height must be even"));
        }
        let geom = FeatureGeometry::new(rig, FEATURE_STRIDE)?;
        Ok(Model {
            psv_taps: Arc::new(stereo::plane_sweep_taps(&geom, &config.depth)?),
            lift_taps: Arc::new(stereo::lift_taps(&geom, &config.depth, &config.grid)?),
            image_taps: Arc::new(stereo::image_taps(&geom, &config.depth, &config.grid)?),
            neighbor_taps: Arc::new(df::neighbor_taps(&config.neighbors, geom.height(), geom.width())?),
            anchors: AnchorSet::new(&config.grid),
            geom,
            config,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, left: &VoxelGrid, right: &VoxelGrid) -> Result<Forward> {
        let cfg = &self.config;
        let bb = cfg.backbone();
        let lg = g.constant(left.data.clone());
        let rg = g.constant(right.data.clone());
        let (sem_l, geo_l) = backbone::extract_features(g, p, &bb, lg)?;
        let (sem_r, geo_r) = backbone::extract_features(g, p, &bb, rg)?;

        let psv = stereo::build_plane_sweep_volume(g, geo_l, geo_r, &self.psv_taps)?;
        let prob = df::depth_probability(g, p, psv)?;
        let depth_init = df::expected_depth(g, prob, &cfg.depth)?;
        let sim_taps = df::neighbor_disparity_taps(&self.geom, g.value(depth_init).data(), &cfg.neighbors)?;
        let sim = df::semantic_similarity(g, sem_l, sem_r, Arc::new(sim_taps))?;
        let conf = df::depth_confidence(g, prob, depth_init, &cfg.depth, self.neighbor_taps.clone())?;
        let prob_refined = df::refine_depth_probability(g, prob, sim, conf, self.neighbor_taps.clone())?;
        let depth_refined = df::expected_depth(g, prob_refined, &cfg.depth)?;

        let depth_vals = g.value(depth_refined).data().to_vec();
        let warped = stereo::warp_right_to_left(g, sem_r, &self.geom, &depth_vals)?;
        let enhanced = df::enhance_semantic(g, p, sem_l, warped)?;
        let v_sem = df::semantic_3d_volume(g, enhanced, prob_refined, self.image_taps.clone(), self.lift_taps.clone())?;
        let v_geo = df::geometric_3d_volume(g, psv, self.lift_taps.clone())?;
        let fused = df::fuse_voxels(g, p, v_geo, v_sem)?;

        let bev = detector::bev_collapse(g, p, detector::COLLAPSE, fused)?;
        let bev_sem = detector::bev_collapse(g, p, detector::SEM_COLLAPSE, v_sem)?;
        let (cls, reg) = detector::dense_head(g, p, bev)?;
        let aux_logits = nn::conv2d(g, p, AUX_HEAD, sem_l, 1, 0)?;
        Ok(Forward {
            sem_left: sem_l,
            prob,
            depth_init,
            prob_refined,
            depth_refined,
            aux_logits,
            cls,
            reg,
            bev_sem,
        })
    }

    /// Post-NMS, locally aligned detections for one instant.
    pub fn detect(&self, params: &ParamStore, left: &VoxelGrid, right: &VoxelGrid, t_us: i64) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let f = self.forward(&mut g, &p, left, right)?;
        let all = detector::decode_all(&self.anchors, g.value(f.cls), g.value(f.reg), t_us);
        let dets: Vec<Detection> = all.into_iter().map(|(_, d)| d).collect();
        let keep = detector::nms_bev(&dets, &self.config.nms)?;
        if keep.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<Box7> = keep.iter().map(|&i| dets[i].bbox).collect();
        let aligned = self.align(&mut g, &p, f.bev_sem, &boxes)?;
        Ok(keep
            .iter()
            .zip(aligned)
            .map(|(&i, bbox)| Detection { bbox, ..dets[i] })
            .collect())
    }

    /// Local alignment offsets (7, n) for `boxes`, as a graph value.
    pub fn align_offsets(&self, g: &mut Graph, p: &BoundParams, bev_sem: Var, boxes: &[Box7]) -> Result<Var> {
        let k = self.config.roi_k;
        let regions = detector::roi_regions(&self.config.grid, boxes, k)?;
        let pooled = detector::roi_bev_pool(g, bev_sem, &regions, k)?;
        detector::local_align_offsets(g, p, pooled)
    }

    fn align(&self, g: &mut Graph, p: &BoundParams, bev_sem: Var, boxes: &[Box7]) -> Result<Vec<Box7>> {
        let off = self.align_offsets(g, p, bev_sem, boxes)?;
        Ok(detector::local_align(boxes, g.value(off)))
    }
}
