//! Deterministic stereo event scenes: moving cuboids rendered as wireframe
//! edges plus surface texture points, with exact box ground truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{wrap_angle, Box7, Class};
use crate::error::{Error, Result};
use crate::eval::{Difficulty, GroundTruthFrame, GtBox};
use crate::event::{Event, EventStream};
use crate::nn::param_rng;
use crate::par;
use crate::stereo::StereoRig;

fn default_micro_step() -> i64 {
    100
}

fn default_density() -> f64 {
    0.15
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t_us: i64,
    #[serde(rename = "box")]
    pub bbox: Box7,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: Class,
    /// Texture points per projected pixel of face area, fixed at t = 0.
    #[serde(default = "default_density")]
    pub texture_density: f64,
    pub keyframes: Vec<Keyframe>,
}

/// Left-camera pose in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoKeyframe {
    pub t_us: i64,
    pub position: [f64; 3],
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rig: StereoRig,
    pub duration_us: i64,
    #[serde(default = "default_micro_step")]
    pub micro_step_us: i64,
    pub seed: u64,
    /// Empty means a static camera at the world origin.
    #[serde(default)]
    pub ego: Vec<EgoKeyframe>,
    pub objects: Vec<ObjectSpec>,
}

fn check_track(times: impl Iterator<Item = i64>, duration: i64, what: &str) -> Result<()> {
    let t: Vec<i64> = times.collect();
    if t.is_empty() || t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("{what}: keyframe times must be strictly increasing")));
    }
    if t[0] > 0 || *t.last().expect("non-empty") < duration {
        return Err(Error::invalid(format!("{what}: keyframes must cover [0, {duration}] us")));
    }
    Ok(())
}

/// Segment index and interpolation weight for time `t` on a keyframe track.
fn locate(times: &[i64], t: i64) -> (usize, f64) {
    let i = times.partition_point(|&k| k <= t).clamp(1, times.len()) - 1;
    if i + 1 >= times.len() {
        return (i, 0.0);
    }
    (i, (t - times[i]) as f64 / (times[i + 1] - times[i]) as f64)
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    if s == 0.0 {
        a
    } else {
        a + (b - a) * s
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        if self.duration_us <= 0 || self.micro_step_us <= 0 {
            return Err(Error::invalid("scene duration and micro-step must be positive"));
        }
        if !self.ego.is_empty() {
            check_track(self.ego.iter().map(|k| k.t_us), self.duration_us, "ego")?;
        }
        for (i, o) in self.objects.iter().enumerate() {
            let what = format!("object {i}");
            check_track(o.keyframes.iter().map(|k| k.t_us), self.duration_us, &what)?;
            if !(o.texture_density >= 0.0) {
                return Err(Error::invalid(format!("{what}: negative texture density")));
            }
            for k in &o.keyframes {
                k.bbox.validate()?;
            }
            for t in o.keyframes.iter().map(|k| k.t_us).chain([0, self.duration_us]) {
                let t = t.clamp(0, self.duration_us);
                let b = self.pose_at(i, t)?;
                if b.z - 0.5 * b.l.hypot(b.w) <= 0.0 {
                    return Err(Error::invalid(format!("{what} is not in front of the cameras at t = {t}")));
                }
            }
        }
        Ok(())
    }

    fn ego_at(&self, t: i64) -> ([f64; 3], f64) {
        if self.ego.is_empty() {
            return ([0.0; 3], 0.0);
        }
        let times: Vec<i64> = self.ego.iter().map(|k| k.t_us).collect();
        let (i, s) = locate(&times, t);
        let a = &self.ego[i];
        let b = &self.ego[(i + 1).min(self.ego.len() - 1)];
        (
            std::array::from_fn(|j| lerp(a.position[j], b.position[j], s)),
            lerp(a.yaw, b.yaw, s),
        )
    }

    /// World-frame pose of object `obj` at `t`.
    pub fn world_pose_at(&self, obj: usize, t: i64) -> Result<Box7> {
        let o = self
            .objects
            .get(obj)
            .ok_or_else(|| Error::invalid(format!("no object {obj}")))?;
        if t < 0 || t > self.duration_us {
            return Err(Error::invalid(format!("t = {t} outside [0, {}]", self.duration_us)));
        }
        let times: Vec<i64> = o.keyframes.iter().map(|k| k.t_us).collect();
        let (i, s) = locate(&times, t);
        let a = o.keyframes[i].bbox.to_array();
        let b = o.keyframes[(i + 1).min(times.len() - 1)].bbox.to_array();
        Ok(Box7::from(std::array::from_fn(|j| lerp(a[j], b[j], s))))
    }

    /// Left-camera-frame pose of object `obj` at `t`, yaw wrapped.
    pub fn pose_at(&self, obj: usize, t: i64) -> Result<Box7> {
        let w = self.world_pose_at(obj, t)?;
        let (pos, eyaw) = self.ego_at(t);
        let (x, y, z) = world_to_camera([w.x, w.y, w.z], pos, eyaw);
        Ok(Box7 {
            x,
            y,
            z,
            yaw: wrap_angle(w.yaw - eyaw),
            ..w
        })
    }

    /// The same scene played `factor` times faster.
    pub fn time_compressed(&self, factor: i64) -> Result<SceneSpec> {
        let div = |t: i64| {
            if factor > 0 && t % factor == 0 {
                Ok(t / factor)
            } else {
                Err(Error::invalid(format!("time {t} not divisible by {factor}")))
            }
        };
        let mut s = self.clone();
        s.duration_us = div(self.duration_us)?;
        s.micro_step_us = div(self.micro_step_us)?;
        for k in &mut s.ego {
            k.t_us = div(k.t_us)?;
        }
        for o in &mut s.objects {
            for k in &mut o.keyframes {
                k.t_us = div(k.t_us)?;
            }
        }
        Ok(s)
    }
}

/// Rotation about y by −yaw after translation: the camera looks along its
/// own +z with yaw measured like box yaw.
fn world_to_camera(p: [f64; 3], cam: [f64; 3], yaw: f64) -> (f64, f64, f64) {
    let (dx, dy, dz) = (p[0] - cam[0], p[1] - cam[1], p[2] - cam[2]);
    if yaw == 0.0 {
        return (dx, dy, dz);
    }
    let (s, c) = yaw.sin_cos();
    (c * dx - s * dz, dy, s * dx + c * dz)
}

/// Point on a box in local `(along length, vertical, across width)` units
/// of half-extent, each in [−1, 1].
#[derive(Clone, Copy, Debug)]
struct LocalPoint {
    a: f64,
    h: f64,
    c: f64,
    intensity: f64,
}

fn local_to_camera(b: &Box7, p: &LocalPoint) -> (f64, f64, f64) {
    let (s, c) = b.yaw.sin_cos();
    let (la, lc) = (p.a * b.l / 2.0, p.c * b.w / 2.0);
    (
        b.x + la * c + lc * s,
        b.y + p.h * b.h / 2.0,
        b.z - la * s + lc * c,
    )
}

const EDGE_INTENSITY: f64 = 1.0;

/// Fixed texture points of one object, drawn from its own RNG stream.
fn texture_points(scene: &SceneSpec, obj: usize) -> Result<Vec<LocalPoint>> {
    let o = &scene.objects[obj];
    let b = scene.pose_at(obj, 0)?;
    let scale = (scene.rig.fx * scene.rig.fy).sqrt() / b.z;
    let mut rng = param_rng(scene.seed, &format!("object{obj}.texture"));
    let mut pts = Vec::new();
    // Faces as (fixed axis, sign, face area in m²).
    let faces = [
        (0, b.w * b.h),
        (1, b.l * b.w),
        (2, b.l * b.h),
    ];
    for (axis, area) in faces {
        for sign in [-1.0, 1.0] {
            let n = (o.texture_density * area * scale * scale).round() as usize;
            for _ in 0..n {
                let mut q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                q[axis] = sign;
                pts.push(LocalPoint {
                    a: q[0],
                    h: q[1],
                    c: q[2],
                    intensity: rng.random_range(0.2..0.8),
                });
            }
        }
    }
    Ok(pts)
}

const CORNERS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

struct Renderer<'a> {
    rig: &'a StereoRig,
    /// Horizontal camera offset in the left frame.
    cam_x: f64,
}

impl Renderer<'_> {
    fn project(&self, p: (f64, f64, f64)) -> Option<(f64, f64)> {
        if p.2 <= 1e-6 {
            return None;
        }
        Some(self.rig.project(p.0 - self.cam_x, p.1, p.2))
    }

    fn splat(&self, img: &mut [f64], p: (f64, f64, f64), intensity: f64) {
        let Some((u, v)) = self.project(p) else { return };
        let (u, v) = (u.round(), v.round());
        let (w, h) = (self.rig.width as f64, self.rig.height as f64);
        if u >= 0.0 && v >= 0.0 && u < w && v < h {
            let i = v as usize * self.rig.width as usize + u as usize;
            img[i] = img[i].max(intensity);
        }
    }

    fn draw(&self, img: &mut [f64], b: &Box7, texture: &[LocalPoint]) {
        let corner = |k: usize| {
            local_to_camera(
                b,
                &LocalPoint {
                    a: CORNERS[k][0],
                    h: CORNERS[k][1],
                    c: CORNERS[k][2],
                    intensity: EDGE_INTENSITY,
                },
            )
        };
        for &(i, j) in &EDGES {
            let (p, q) = (corner(i), corner(j));
            let n = match (self.project(p), self.project(q)) {
                (Some(a), Some(b)) => ((a.0 - b.0).hypot(a.1 - b.1) * 2.0).ceil() as usize + 1,
                _ => 64,
            }
            .min(4096);
            for s in 0..=n {
                let t = s as f64 / n as f64;
                let pt = (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1), p.2 + t * (q.2 - p.2));
                self.splat(img, pt, EDGE_INTENSITY);
            }
        }
        for tp in texture {
            self.splat(img, local_to_camera(b, tp), tp.intensity);
        }
    }
}

/// Renders the left and right event streams. Each micro-step redraws both
/// intensity images; every pixel whose value changed emits one event with
/// the sign of the change, in row-major order within the step.
pub fn render_events(scene: &SceneSpec) -> Result<(EventStream, EventStream)> {
    scene.validate()?;
    let textures: Vec<Vec<LocalPoint>> = (0..scene.objects.len())
        .map(|i| texture_points(scene, i))
        .collect::<Result<_>>()?;
    let steps = scene.duration_us / scene.micro_step_us;
    let poses: Vec<Vec<Box7>> = (0..=steps)
        .map(|k| {
            (0..scene.objects.len())
                .map(|i| scene.pose_at(i, k * scene.micro_step_us))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let (w, h) = (scene.rig.width, scene.rig.height);
    let streams = par::map_indexed(2, |cam| {
        let r = Renderer {
            rig: &scene.rig,
            cam_x: if cam == 0 { 0.0 } else { scene.rig.baseline_m },
        };
        let n = w as usize * h as usize;
        let mut prev = vec![0.0; n];
        let mut events = Vec::new();
        for (k, objs) in poses.iter().enumerate() {
            let mut img = vec![0.0; n];
            for (b, tex) in objs.iter().zip(&textures) {
                r.draw(&mut img, b, tex);
            }
            if k > 0 {
                let t = k as i64 * scene.micro_step_us;
                for (i, (&a, &b)) in img.iter().zip(&prev).enumerate() {
                    if a != b {
                        events.push(Event {
                            u: (i % w as usize) as u16,
                            v: (i / w as usize) as u16,
                            t,
                            p: if a > b { 1 } else { -1 },
                        });
                    }
                }
            }
            prev = img;
        }
        events
    });
    let mut it = streams.into_iter();
    let left = EventStream::new(w, h, it.next().expect("left"))?;
    let right = EventStream::new(w, h, it.next().expect("right"))?;
    Ok((left, right))
}

/// Exact camera-frame boxes at each instant; every box is labeled easy.
pub fn emit_ground_truth(scene: &SceneSpec, instants: &[i64]) -> Result<Vec<GroundTruthFrame>> {
    instants
        .iter()
        .map(|&t| {
            let boxes = (0..scene.objects.len())
                .map(|i| {
                    Ok(GtBox {
                        class: scene.objects[i].class,
                        difficulty: Difficulty::Easy,
                        bbox: scene.pose_at(i, t)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(GroundTruthFrame { t_us: t, boxes })
        })
        .collect()
}
