//! Rectified stereo camera model, depth hypotheses, plane-sweep volumes and
//! the image-to-voxel lifting used by both 3-D volumes.
//!
//! Sampling positions depend only on geometry (or on detached depth maps),
//! so every resampling is expressed as precomputed [`SampleTaps`].

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, SampleTaps, TapsBuilder, Var};

/// Rectified pinhole stereo pair; the right camera sits `baseline_m` to the
/// right of the left one. Serialized as the calibration file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline_m: f64,
    pub width: u16,
    pub height: u16,
}

impl StereoRig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.fx, self.fy, self.baseline_m].iter().all(|v| v.is_finite() && *v > 0.0)
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.width > 0
            && self.height > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid stereo rig {self:?}")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rig: StereoRig = serde_json::from_slice(&text)?;
        rig.validate()?;
        Ok(rig)
    }

    /// Sensor-pixel projection of a camera-frame point (z > 0).
    pub fn project(&self, x: f64, y: f64, z: f64) -> (f64, f64) {
        (self.fx * x / z + self.cx, self.fy * y / z + self.cy)
    }
}

/// Horizontal disparity in sensor pixels of a point at depth `z`.
pub fn disparity_for_depth(rig: &StereoRig, z: f64) -> Result<f64> {
    if z.is_nan() || z <= 0.0 {
        return Err(Error::invalid(format!("depth must be positive, got {z}")));
    }
    Ok(rig.fx * rig.baseline_m / z)
}

/// Uniformly spaced depth hypotheses `d(w) = z_min + w * interval`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthGrid {
    pub z_min: f64,
    pub interval: f64,
    pub levels: usize,
}

impl Default for DepthGrid {
    /// 64 levels spanning 2.0 m to about 56.9 m.
    fn default() -> Self {
        DepthGrid {
            z_min: 2.0,
            interval: 54.9 / 63.0,
            levels: 64,
        }
    }
}

impl DepthGrid {
    pub fn desk() -> Self {
        DepthGrid {
            z_min: 2.0,
            interval: 0.5,
            levels: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.interval > 0.0) || self.levels < 2 || !self.z_min.is_finite() {
            return Err(Error::invalid(format!("invalid depth grid {self:?}")));
        }
        Ok(())
    }

    pub fn depth(&self, w: usize) -> f64 {
        self.z_min + w as f64 * self.interval
    }

    /// Fractional hypothesis index of depth `z`.
    pub fn index_of(&self, z: f64) -> f64 {
        (z - self.z_min) / self.interval
    }

    pub fn z_max(&self) -> f64 {
        self.depth(self.levels - 1)
    }

    pub fn depths(&self) -> Vec<f64> {
        (0..self.levels).map(|w| self.depth(w)).collect()
    }

    /// Returns the `(index -> depth, depth -> fractional index)` pair.
    pub fn index_maps(&self) -> (impl Fn(usize) -> f64 + '_, impl Fn(f64) -> f64 + '_) {
        (move |w| self.depth(w), move |z| self.index_of(z))
    }
}

/// Axis-aligned voxelization of the detection volume in the left camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionGrid {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub voxel: f64,
}

impl Default for DetectionGrid {
    fn default() -> Self {
        DetectionGrid {
            x_range: [-30.4, 30.4],
            y_range: [-1.0, 3.0],
            z_range: [2.0, 56.9],
            voxel: 0.2,
        }
    }
}

impl DetectionGrid {
    pub fn desk() -> Self {
        DetectionGrid {
            x_range: [-6.0, 6.0],
            y_range: [-1.0, 3.0],
            z_range: [2.0, 14.0],
            voxel: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [x, y, z] = self.extents();
        if !(self.voxel > 0.0) || x == 0 || y == 0 || z == 0 || self.z_range[0] <= 0.0 {
            return Err(Error::invalid(format!("invalid detection grid {self:?}")));
        }
        Ok(())
    }

    fn extent(&self, r: [f64; 2]) -> usize {
        ((r[1] - r[0]) / self.voxel).round().max(0.0) as usize
    }

    /// Voxel counts `[X, Y, Z]`.
    pub fn extents(&self) -> [usize; 3] {
        [
            self.extent(self.x_range),
            self.extent(self.y_range),
            self.extent(self.z_range),
        ]
    }

    pub fn center_x(&self, i: usize) -> f64 {
        self.x_range[0] + (i as f64 + 0.5) * self.voxel
    }

    pub fn center_y(&self, j: usize) -> f64 {
        self.y_range[0] + (j as f64 + 0.5) * self.voxel
    }

    pub fn center_z(&self, k: usize) -> f64 {
        self.z_range[0] + (k as f64 + 0.5) * self.voxel
    }
}

/// Camera model at feature resolution: sensor coordinates divided by `stride`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureGeometry {
    pub rig: StereoRig,
    pub stride: usize,
}

impl FeatureGeometry {
    pub fn new(rig: StereoRig, stride: usize) -> Result<Self> {
        rig.validate()?;
        if stride == 0 {
            return Err(Error::invalid("feature stride must be positive"));
        }
        Ok(FeatureGeometry { rig, stride })
    }

    pub fn width(&self) -> usize {
        self.rig.width as usize / self.stride
    }

    pub fn height(&self) -> usize {
        self.rig.height as usize / self.stride
    }

    /// Disparity in feature pixels; zero for non-positive or non-finite depth.
    pub fn disparity(&self, z: f64) -> f64 {
        if z.is_finite() && z > 0.0 {
            self.rig.fx * self.rig.baseline_m / (z * self.stride as f64)
        } else {
            0.0
        }
    }

    /// Feature-pixel projection of a camera-frame point.
    pub fn project(&self, x: f64, y: f64, z: f64) -> (f64, f64) {
        let (u, v) = self.rig.project(x, y, z);
        let s = self.stride as f64;
        (u / s, v / s)
    }
}

/// Multilinear interpolation taps for `coords[a]` on a row-major grid with
/// axis sizes `dims[a]`. Returns `false` (and pushes nothing) when any
/// coordinate lies outside `[0, dims[a] - 1]`.
pub(crate) fn push_multilinear(b: &mut TapsBuilder, base: usize, coords: &[f64], dims: &[usize]) -> bool {
    debug_assert_eq!(coords.len(), dims.len());
    let mut corners: [(usize, f64); 3] = [(0, 0.0); 3];
    for (a, (&x, &n)) in coords.iter().zip(dims).enumerate() {
        if !(x >= 0.0 && x <= (n - 1) as f64) {
            return false;
        }
        let i0 = x.floor();
        corners[a] = (i0 as usize, x - i0);
    }
    let k = coords.len();
    for mask in 0..(1usize << k) {
        let mut idx = 0;
        let mut w = 1.0;
        for a in 0..k {
            let (i0, f) = corners[a];
            let hi = mask >> a & 1 == 1;
            let wa = if hi { f } else { 1.0 - f };
            if wa == 0.0 {
                w = 0.0;
                break;
            }
            idx = idx * dims[a] + i0 + hi as usize;
            w *= wa;
        }
        if w != 0.0 {
            b.push(base + idx, w);
        }
    }
    true
}

/// Taps sampling right features (H', W') at `u - disparity(d(w))` for every
/// depth level, giving a (D, H', W') output.
pub fn plane_sweep_taps(fg: &FeatureGeometry, depth: &DepthGrid) -> Result<SampleTaps> {
    depth.validate()?;
    let (h, w) = (fg.height(), fg.width());
    let mut b = SampleTaps::builder(h * w, vec![depth.levels, h, w]);
    for lvl in 0..depth.levels {
        let disp = fg.disparity(depth.depth(lvl));
        for v in 0..h {
            for u in 0..w {
                push_multilinear(&mut b, v * w, &[u as f64 - disp], &[w]);
                b.end_row();
            }
        }
    }
    b.finish()
}

/// Left features broadcast along depth concatenated with disparity-shifted
/// right features: (C, H', W') x2 -> (2C, D, H', W').
pub fn build_plane_sweep_volume(g: &mut Graph, left: Var, right: Var, taps: &Arc<SampleTaps>) -> Result<Var> {
    let ls = g.shape(left).to_vec();
    if ls.len() != 3 || g.shape(right) != ls.as_slice() {
        return Err(Error::shape(
            "plane_sweep",
            format!("left {ls:?} vs right {:?}", g.shape(right)),
        ));
    }
    let (c, h, w) = (ls[0], ls[1], ls[2]);
    let d = taps.out_shape()[0];
    let l4 = g.reshape(left, &[c, 1, h, w])?;
    let lb = g.broadcast(l4, &[c, d, h, w])?;
    let rs = g.sample(right, taps.clone())?;
    g.concat_axis(&[lb, rs], 0)
}

/// Taps lifting a (D, H', W') source onto voxel centers (Y, Z, X):
/// bilinear in the projected feature pixel and linear in depth index, zero
/// when the projection leaves the image or the depth range.
pub fn lift_taps(fg: &FeatureGeometry, depth: &DepthGrid, grid: &DetectionGrid) -> Result<SampleTaps> {
    depth.validate()?;
    grid.validate()?;
    let (h, w) = (fg.height(), fg.width());
    let [nx, ny, nz] = grid.extents();
    let mut b = SampleTaps::builder(depth.levels * h * w, vec![ny, nz, nx]);
    for j in 0..ny {
        let y = grid.center_y(j);
        for k in 0..nz {
            let z = grid.center_z(k);
            let wi = depth.index_of(z);
            for i in 0..nx {
                let (u, v) = fg.project(grid.center_x(i), y, z);
                push_multilinear(&mut b, 0, &[wi, v, u], &[depth.levels, h, w]);
                b.end_row();
            }
        }
    }
    b.finish()
}

/// Taps sampling an (H', W') image at each voxel's projection, using the same
/// validity mask as [`lift_taps`] so both factors of a masked product vanish
/// together.
pub fn image_taps(fg: &FeatureGeometry, depth: &DepthGrid, grid: &DetectionGrid) -> Result<SampleTaps> {
    depth.validate()?;
    grid.validate()?;
    let (h, w) = (fg.height(), fg.width());
    let [nx, ny, nz] = grid.extents();
    let zmax = (depth.levels - 1) as f64;
    let mut b = SampleTaps::builder(h * w, vec![ny, nz, nx]);
    for j in 0..ny {
        let y = grid.center_y(j);
        for k in 0..nz {
            let z = grid.center_z(k);
            let wi = depth.index_of(z);
            for i in 0..nx {
                if (0.0..=zmax).contains(&wi) {
                    let (u, v) = fg.project(grid.center_x(i), y, z);
                    push_multilinear(&mut b, 0, &[v, u], &[h, w]);
                }
                b.end_row();
            }
        }
    }
    b.finish()
}

/// Taps warping right features to the left view with a per-pixel depth map
/// (row-major H' x W'); invalid depths produce zero rows.
pub fn warp_taps(fg: &FeatureGeometry, depth_map: &[f64]) -> Result<SampleTaps> {
    let (h, w) = (fg.height(), fg.width());
    if depth_map.len() != h * w {
        return Err(Error::shape(
            "warp_right_to_left",
            format!("depth map has {} values for {h}x{w} features", depth_map.len()),
        ));
    }
    let mut b = SampleTaps::builder(h * w, vec![h, w]);
    for v in 0..h {
        for u in 0..w {
            let z = depth_map[v * w + u];
            if z.is_finite() && z > 0.0 {
                push_multilinear(&mut b, v * w, &[u as f64 - fg.disparity(z)], &[w]);
            }
            b.end_row();
        }
    }
    b.finish()
}

/// Right features (C, H', W') resampled into the left view.
pub fn warp_right_to_left(g: &mut Graph, right: Var, fg: &FeatureGeometry, depth_map: &[f64]) -> Result<Var> {
    let taps = Arc::new(warp_taps(fg, depth_map)?);
    g.sample(right, taps)
}
