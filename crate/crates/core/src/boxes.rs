//! 7-DoF boxes, their anchor-relative encoding, and detections.
//!
//! Camera frame: x right, y down, z forward. Yaw rotates about y; the box
//! length runs along `(cos θ, −sin θ)` in the (x, z) plane and `y` is the
//! vertical center.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 7]", into = "[f64; 7]")]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

impl From<[f64; 7]> for Box7 {
    fn from(a: [f64; 7]) -> Self {
        Box7 {
            x: a[0],
            y: a[1],
            z: a[2],
            h: a[3],
            w: a[4],
            l: a[5],
            yaw: a[6],
        }
    }
}

impl From<Box7> for [f64; 7] {
    fn from(b: Box7) -> Self {
        b.to_array()
    }
}

impl Box7 {
    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.h, self.w, self.l, self.yaw]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.to_array().iter().all(|v| v.is_finite());
        if !finite || self.h <= 0.0 || self.w <= 0.0 || self.l <= 0.0 {
            return Err(Error::invalid(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    /// Footprint corners in the (x, z) plane, counter-clockwise.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let along = (c * self.l / 2.0, -s * self.l / 2.0);
        let across = (s * self.w / 2.0, c * self.w / 2.0);
        let p = |a: f64, b: f64| (self.x + a * along.0 + b * across.0, self.z + a * along.1 + b * across.1);
        [p(1.0, 1.0), p(-1.0, 1.0), p(-1.0, -1.0), p(1.0, -1.0)]
    }

    /// Whether `(x, z)` lies inside the footprint (boundary inclusive).
    pub fn bev_contains(&self, x: f64, z: f64) -> bool {
        let (a, b) = self.to_local(x, z);
        a.abs() <= self.l / 2.0 && b.abs() <= self.w / 2.0
    }

    /// Coordinates of `(x, z)` along the box's length and width axes.
    pub fn to_local(&self, x: f64, z: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dz) = (x - self.x, z - self.z);
        (dx * c - dz * s, dx * s + dz * c)
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Anchor-relative box residual `(δx, δy, δz, δh, δw, δl, δθ)`.
pub type BoxOffset = [f64; 7];

const ANGLE_EPS: f64 = 1e-7;

/// Additive centers, exponential dims, tanh-bounded yaw update.
pub fn decode_box(anchor: &Box7, d: &BoxOffset) -> Box7 {
    Box7 {
        x: anchor.x + d[0],
        y: anchor.y + d[1],
        z: anchor.z + d[2],
        h: anchor.h * d[3].exp(),
        w: anchor.w * d[4].exp(),
        l: anchor.l * d[5].exp(),
        yaw: wrap_angle(anchor.yaw + FRAC_PI_2 * d[6].tanh()),
    }
}

/// Inverse of [`decode_box`]; fails when the yaw difference is outside the
/// open interval (−π/2, π/2) the decoder can reach.
pub fn encode_box(anchor: &Box7, target: &Box7) -> Result<BoxOffset> {
    let dyaw = wrap_angle(target.yaw - anchor.yaw);
    if dyaw.abs() >= FRAC_PI_2 {
        return Err(Error::invalid(format!(
            "yaw difference {dyaw} unreachable from anchor yaw {}",
            anchor.yaw
        )));
    }
    let r = (dyaw / FRAC_PI_2).clamp(-1.0 + ANGLE_EPS, 1.0 - ANGLE_EPS);
    Ok([
        target.x - anchor.x,
        target.y - anchor.y,
        target.z - anchor.z,
        (target.h / anchor.h).ln(),
        (target.w / anchor.w).ln(),
        (target.l / anchor.l).ln(),
        r.atanh(),
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Vehicle,
    Pedestrian,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Vehicle, Class::Pedestrian];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Vehicle => "vehicle",
            Class::Pedestrian => "pedestrian",
        }
    }

    /// Class-mean box template at yaw 0 and origin x/z.
    pub fn template(self) -> Box7 {
        let (y, h, w, l) = match self {
            Class::Vehicle => (0.47, 1.79, 1.86, 4.28),
            Class::Pedestrian => (0.6, 1.73, 0.6, 0.8),
        };
        Box7 {
            x: 0.0,
            y,
            z: 0.0,
            h,
            w,
            l,
            yaw: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub t_us: i64,
    pub class: Class,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: Box7,
}
