//! Shared-weight stereo feature extractor: a stride-4 convolutional trunk
//! feeding independent semantic and geometric heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{BoundParams, Graph, ParamStore, Var};

/// Trunk strides; their product is the feature stride.
pub const TRUNK_STRIDES: [usize; 3] = [2, 1, 2];
pub const FEATURE_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Input voxel-grid bins.
    pub bins: usize,
    pub trunk_channels: [usize; 2],
    /// Output channels of both heads.
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            bins: 5,
            trunk_channels: [16, 32],
            channels: 32,
        }
    }
}

const TRUNK: [&str; 3] = ["backbone.trunk0", "backbone.trunk1", "backbone.trunk2"];
pub const SEM_HEAD: [&str; 2] = ["backbone.sem0", "backbone.sem1"];
pub const GEO_HEAD: [&str; 2] = ["backbone.geo0", "backbone.geo1"];

pub fn init_weights(store: &mut ParamStore, seed: u64, cfg: &BackboneConfig) -> Result<()> {
    let [c1, c2] = cfg.trunk_channels;
    let chans = [cfg.bins, c1, c2, cfg.channels];
    for (i, name) in TRUNK.iter().enumerate() {
        nn::add_conv(store, seed, name, chans[i + 1], chans[i], &[3, 3])?;
    }
    for name in SEM_HEAD.iter().chain(&GEO_HEAD) {
        nn::add_conv(store, seed, name, cfg.channels, cfg.channels, &[3, 3])?;
    }
    Ok(())
}

fn head(g: &mut Graph, p: &BoundParams, names: &[&str; 2], x: Var) -> Result<Var> {
    let h = nn::conv2d(g, p, names[0], x, 1, 1)?;
    let h = g.relu(h)?;
    nn::conv2d(g, p, names[1], h, 1, 1)
}

/// (B, H, W) voxel grid -> (semantic, geometric) features, each (C, H/4, W/4).
pub fn extract_features(g: &mut Graph, p: &BoundParams, cfg: &BackboneConfig, grid: Var) -> Result<(Var, Var)> {
    let shape = g.shape(grid).to_vec();
    if shape.len() != 3 || shape[0] != cfg.bins || !shape[1].is_multiple_of(FEATURE_STRIDE) || !shape[2].is_multiple_of(FEATURE_STRIDE) {
        return Err(Error::shape(
            "extract_features",
            format!("grid {shape:?} for {} bins at stride {FEATURE_STRIDE}", cfg.bins),
        ));
    }
    let mut x = grid;
    for (name, &s) in TRUNK.iter().zip(&TRUNK_STRIDES) {
        x = nn::conv2d(g, p, name, x, s, 1)?;
        x = g.relu(x)?;
    }
    let sem = head(g, p, &SEM_HEAD, x)?;
    let geo = head(g, p, &GEO_HEAD, x)?;
    Ok((sem, geo))
}
