//! Run configuration, on-disk formats and the five pipeline commands:
//! synthesis, toy training, inference, evaluation and gradient checking.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::{Class, Detection};
use crate::error::{Error, Result};
use crate::eval::{self, Difficulty, GroundTruthFrame, Metric};
use crate::event::{self, BlindWindow, EventStream};
use crate::gradsuite::{self, CheckEntry};
use crate::losses::LossBreakdown;
use crate::model::{Model, ModelConfig};
use crate::par;
use crate::stereo::StereoRig;
use crate::synth::{self, SceneSpec};
use crate::tensor::{load_weights, save_weights, AdamW, OpKind, ParamStore};
use crate::train::{self, Sample};

pub const MOTION_SCALES: [u32; 3] = [1, 2, 4];
pub const TIME_SLICES: [u32; 2] = [10, 20];

/// Spacing of the annotation frames written by [`cmd_synth`].
pub const ANNOTATION_STEP_US: i64 = 5_000;

pub const LEFT_EVENTS: &str = "left.evt";
pub const RIGHT_EVENTS: &str = "right.evt";
pub const CALIBRATION: &str = "calibration.json";
pub const ANNOTATIONS: &str = "annotations.json";
pub const MANIFEST: &str = "manifest.json";
pub const LOSS_LOG: &str = "loss_log.csv";

/// Per-class IoU thresholds used by evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IouThresholds {
    pub vehicle: f64,
    pub pedestrian: f64,
}

impl Default for IouThresholds {
    fn default() -> Self {
        IouThresholds {
            vehicle: 0.7,
            pedestrian: 0.5,
        }
    }
}

impl IouThresholds {
    pub fn get(&self, class: Class) -> f64 {
        match class {
            Class::Vehicle => self.vehicle,
            Class::Pedestrian => self.pedestrian,
        }
    }
}

fn default_dtau() -> i64 {
    10_000
}
fn default_motion_scale() -> u32 {
    1
}
fn default_time_slice() -> u32 {
    10
}
fn default_period() -> i64 {
    100_000
}
fn default_max_instants() -> usize {
    64
}
fn default_max_pixels() -> usize {
    128 * 128
}

/// A single JSON run file. Relative paths resolve against the file's
/// directory on [`RunConfig::load`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub events_left: PathBuf,
    pub events_right: PathBuf,
    pub calibration: PathBuf,
    pub annotations: PathBuf,
    pub weights: PathBuf,
    #[serde(default = "default_dtau")]
    pub delta_tau_us: i64,
    #[serde(default = "default_motion_scale")]
    pub motion_scale: u32,
    #[serde(default = "default_time_slice")]
    pub time_slice: u32,
    /// Spacing of the synchronized fixed-rate frames at motion scale 1.
    #[serde(default = "default_period")]
    pub active_period_us: i64,
    #[serde(default)]
    pub active_origin_us: i64,
    #[serde(default)]
    pub stream_start_us: i64,
    /// Defaults to one past the last event.
    #[serde(default)]
    pub stream_end_us: Option<i64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamW,
    #[serde(default)]
    pub iou_thresholds: IouThresholds,
    #[serde(default = "default_max_instants")]
    pub max_train_instants: usize,
    #[serde(default = "default_max_pixels")]
    pub max_train_sensor_pixels: usize,
}

impl RunConfig {
    /// Configuration with default settings for a dataset directory laid out
    /// by [`cmd_synth`].
    pub fn for_dataset(dir: &Path, weights: &Path) -> Self {
        RunConfig {
            events_left: dir.join(LEFT_EVENTS),
            events_right: dir.join(RIGHT_EVENTS),
            calibration: dir.join(CALIBRATION),
            annotations: dir.join(ANNOTATIONS),
            weights: weights.to_path_buf(),
            delta_tau_us: default_dtau(),
            motion_scale: default_motion_scale(),
            time_slice: default_time_slice(),
            active_period_us: default_period(),
            active_origin_us: 0,
            stream_start_us: 0,
            stream_end_us: None,
            seed: 0,
            model: ModelConfig::default(),
            optimizer: AdamW::default(),
            iou_thresholds: IouThresholds::default(),
            max_train_instants: default_max_instants(),
            max_train_sensor_pixels: default_max_pixels(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses, validates and resolves relative paths against `path`'s directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c = RunConfig::from_json(&text)?;
        Ok(c.resolved(path.parent().unwrap_or(Path::new("."))))
    }

    pub fn resolved(mut self, base: &Path) -> Self {
        for p in [
            &mut self.events_left,
            &mut self.events_right,
            &mut self.calibration,
            &mut self.annotations,
            &mut self.weights,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_tau_us <= 0 {
            return Err(Error::invalid("delta_tau_us must be positive"));
        }
        if !MOTION_SCALES.contains(&self.motion_scale) {
            return Err(Error::invalid(format!(
                "motion_scale {} is not one of {MOTION_SCALES:?}",
                self.motion_scale
            )));
        }
        if !TIME_SLICES.contains(&self.time_slice) {
            return Err(Error::invalid(format!(
                "time_slice {} is not one of {TIME_SLICES:?}",
                self.time_slice
            )));
        }
        if self.active_period_us <= 0 {
            return Err(Error::invalid("active_period_us must be positive"));
        }
        if self.stream_end_us.is_some_and(|e| e <= self.stream_start_us) {
            return Err(Error::invalid("stream_end_us must exceed stream_start_us"));
        }
        for (c, t) in [(Class::Vehicle, self.iou_thresholds.vehicle), (Class::Pedestrian, self.iou_thresholds.pedestrian)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::invalid(format!("{} IoU threshold {t} outside (0, 1]", c.name())));
            }
        }
        self.model.validate()
    }

    fn window(&self, tau: i64) -> BlindWindow {
        BlindWindow {
            tau,
            dtau: self.delta_tau_us,
            motion_scale: self.motion_scale,
            time_slice: self.time_slice,
        }
    }

    /// Evaluation instants up to `end`, split into those whose accumulation
    /// window lies inside `[stream_start_us, end]` and those that do not.
    /// Active frames are `motion_scale · active_period_us` apart.
    pub fn instants(&self, end: i64) -> Result<(Vec<i64>, Vec<i64>)> {
        let period = self.motion_scale as i64 * self.active_period_us;
        let mut covered = Vec::new();
        let mut skipped = Vec::new();
        let k0 = (self.stream_start_us - self.active_origin_us).div_euclid(period);
        let mut start = self.active_origin_us + k0 * period;
        while start + period <= end {
            for tau in event::blind_time_instants(start, start + period, self.time_slice)? {
                if self.window(tau).start() >= self.stream_start_us && tau <= end {
                    covered.push(tau);
                } else {
                    skipped.push(tau);
                }
            }
            start += period;
        }
        Ok((covered, skipped))
    }
}

/// Annotation file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub frames: Vec<GroundTruthFrame>,
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let a: Annotations = serde_json::from_str(&text)?;
    for f in &a.frames {
        for b in &f.boxes {
            b.bbox.validate()?;
        }
    }
    Ok(a)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Streams, calibration and annotations referenced by a run configuration.
pub struct Dataset {
    pub rig: StereoRig,
    pub left: EventStream,
    pub right: EventStream,
    pub annotations: Annotations,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let rig = StereoRig::load(&cfg.calibration)?;
        let sensor = Some((rig.width, rig.height));
        Ok(Dataset {
            left: event::read_events(&cfg.events_left, sensor)?,
            right: event::read_events(&cfg.events_right, sensor)?,
            annotations: read_annotations(&cfg.annotations)?,
            rig,
        })
    }

    fn stream_end(&self, cfg: &RunConfig) -> i64 {
        cfg.stream_end_us.unwrap_or_else(|| {
            let last = |s: &EventStream| s.events().last().map(|e| e.t);
            match last(&self.left).max(last(&self.right)) {
                Some(t) => t + 1,
                None => cfg.stream_start_us,
            }
        })
    }

    fn frame_at(&self, t: i64) -> Option<&GroundTruthFrame> {
        self.annotations.frames.iter().find(|f| f.t_us == t)
    }
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Content hashes of a synthesized dataset directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders `scene` into `out_dir`: both event streams, calibration,
/// annotations every [`ANNOTATION_STEP_US`], and a hash manifest.
pub fn synthesize(scene: &SceneSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let (left, right) = synth::render_events(scene)?;
    let times: Vec<i64> = (0..=scene.duration_us / ANNOTATION_STEP_US)
        .map(|k| k * ANNOTATION_STEP_US)
        .collect();
    let annotations = Annotations {
        frames: synth::emit_ground_truth(scene, &times)?,
    };
    let files: [(&str, Vec<u8>); 4] = [
        (LEFT_EVENTS, event::encode_binary(&left)?),
        (RIGHT_EVENTS, event::encode_binary(&right)?),
        (CALIBRATION, serde_json::to_vec_pretty(&scene.rig)?),
        (ANNOTATIONS, serde_json::to_vec_pretty(&annotations)?),
    ];
    let mut manifest = DatasetManifest { files: Vec::new() };
    for (name, bytes) in &files {
        write_bytes(&out_dir.join(name), bytes)?;
        manifest.files.push(ManifestEntry {
            name: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
    }
    write_bytes(&out_dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn cmd_synth(spec_path: &Path, out_dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let scene: SceneSpec = serde_json::from_str(&text)?;
    synthesize(&scene, out_dir)
}

/// Names of the files in `dir` whose size or hash differs from its manifest.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&text)?;
    let mut bad = Vec::new();
    for f in &manifest.files {
        let path = dir.join(&f.name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() as u64 != f.bytes || sha256_hex(&bytes) != f.sha256 {
            bad.push(f.name.clone());
        }
    }
    Ok(bad)
}

// ---------------------------------------------------------------- training

/// Training samples at the covered instants, each with its GT frame.
pub fn training_samples(cfg: &RunConfig, data: &Dataset) -> Result<Vec<Sample>> {
    let pixels = data.rig.width as usize * data.rig.height as usize;
    if pixels > cfg.max_train_sensor_pixels {
        return Err(Error::invalid(format!(
            "sensor has {pixels} pixels, above the training cap of {}; the trainer is meant for desk-scale toy data only",
            cfg.max_train_sensor_pixels
        )));
    }
    let (instants, skipped) = cfg.instants(data.stream_end(cfg))?;
    if !skipped.is_empty() {
        log::warn!("{} instants lack stream coverage and are not used", skipped.len());
    }
    if instants.len() > cfg.max_train_instants {
        return Err(Error::invalid(format!(
            "{} training instants exceed the cap of {}; the trainer is meant for desk-scale toy data only",
            instants.len(),
            cfg.max_train_instants
        )));
    }
    let bins = cfg.model.bins;
    instants
        .iter()
        .map(|&t| {
            let frame = data
                .frame_at(t)
                .ok_or_else(|| Error::Format(format!("no annotation frame at training instant {t} us")))?;
            let w = cfg.window(t);
            Ok(Sample {
                t_us: t,
                left: event::accumulate_motion_scaled(&data.left, &w, bins)?,
                right: event::accumulate_motion_scaled(&data.right, &w, bins)?,
                gts: frame.boxes.clone(),
            })
        })
        .collect()
}

pub fn loss_log_header() -> String {
    let mut s = String::from("step");
    for n in LossBreakdown::NAMES {
        s.push(',');
        s.push_str(n);
    }
    s.push_str(",total");
    s
}

pub fn loss_log_row(step: usize, b: &LossBreakdown) -> String {
    let mut s = step.to_string();
    for v in b.components() {
        s.push_str(&format!(",{v:e}"));
    }
    s.push_str(&format!(",{:e}", b.total));
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub samples: usize,
    pub losses: Vec<LossBreakdown>,
}

/// Trains from the seed-initialized model for `steps` AdamW updates, saves
/// the weights to `cfg.weights` and writes the per-step loss log.
pub fn cmd_train_toy(cfg: &RunConfig, steps: usize, log_path: Option<&Path>) -> Result<TrainReport> {
    let data = Dataset::load(cfg)?;
    let samples = training_samples(cfg, &data)?;
    let model = Model::new(cfg.model.clone(), data.rig)?;
    let mut params = cfg.model.init_params(cfg.seed)?;
    let log_path = log_path.map_or_else(|| cfg.weights.join(LOSS_LOG), Path::to_path_buf);
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    writeln!(log, "{}", loss_log_header()).map_err(|e| Error::io(&log_path, e))?;
    let mut losses = Vec::with_capacity(steps);
    train::train(&model, &mut params, &samples, cfg.optimizer, steps, |step, b| {
        writeln!(log, "{}", loss_log_row(step, b)).map_err(|e| Error::io(&log_path, e))?;
        log::debug!("step {step} total {:.6}", b.total);
        losses.push(*b);
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save_weights(&cfg.weights, &params, serde_json::to_value(&cfg.model)?)?;
    Ok(TrainReport {
        samples: samples.len(),
        losses,
    })
}

// ---------------------------------------------------------------- inference

/// Inference result: the detections file body plus the instant bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub instants_us: Vec<i64>,
    /// Instants skipped for lack of stream coverage.
    pub skipped_us: Vec<i64>,
    pub detections: Vec<Detection>,
}

/// Loads weights and checks them against the run's model configuration.
pub fn load_model_weights(cfg: &RunConfig) -> Result<ParamStore> {
    let (params, stored) = load_weights(&cfg.weights)?;
    let stored: ModelConfig = serde_json::from_value(stored)?;
    if stored != cfg.model {
        return Err(Error::Format(format!(
            "weights in {} were saved for a different model configuration",
            cfg.weights.display()
        )));
    }
    cfg.model.check_params(&params)?;
    Ok(params)
}

/// Detections at every covered instant, in instant order.
pub fn infer(cfg: &RunConfig, data: &Dataset, params: &ParamStore) -> Result<InferOutput> {
    let model = Model::new(cfg.model.clone(), data.rig)?;
    let (instants, skipped) = cfg.instants(data.stream_end(cfg))?;
    for t in &skipped {
        log::warn!("instant {t} us skipped: accumulation window not covered by the stream");
    }
    let bins = cfg.model.bins;
    let per_instant = par::map_indexed(instants.len(), |i| {
        let w = cfg.window(instants[i]);
        let left = event::accumulate_motion_scaled(&data.left, &w, bins)?;
        let right = event::accumulate_motion_scaled(&data.right, &w, bins)?;
        model.detect(params, &left, &right, instants[i])
    });
    let mut detections = Vec::new();
    for d in per_instant {
        detections.extend(d?);
    }
    Ok(InferOutput {
        instants_us: instants,
        skipped_us: skipped,
        detections,
    })
}

/// Writes the detections of every covered instant as a JSON list.
pub fn cmd_infer(cfg: &RunConfig, out: &Path) -> Result<InferOutput> {
    let params = load_model_weights(cfg)?;
    let data = Dataset::load(cfg)?;
    let res = infer(cfg, &data, &params)?;
    write_bytes(out, &serde_json::to_vec_pretty(&res.detections)?)?;
    Ok(res)
}

// ---------------------------------------------------------------- evaluation

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResultRow {
    pub class: Class,
    pub difficulty: Difficulty,
    pub metric: Metric,
    pub motion_scale: u32,
    pub time_slice: u32,
    pub value: f64,
}

/// Evaluation instants: the covered instants of the configuration, ending
/// at `stream_end_us` or else at the last annotation frame.
pub fn eval_instants(cfg: &RunConfig, ann: &Annotations) -> Result<Vec<i64>> {
    let end = match cfg.stream_end_us {
        Some(e) => e,
        None => match ann.frames.iter().map(|f| f.t_us).max() {
            Some(t) => t,
            None => return Ok(Vec::new()),
        },
    };
    Ok(cfg.instants(end)?.0)
}

/// AP rows for every class, difficulty and metric over `instants`.
pub fn evaluate(cfg: &RunConfig, dets: &[Detection], ann: &Annotations, instants: &[i64]) -> Result<Vec<ResultRow>> {
    let instants: BTreeSet<i64> = instants.iter().copied().collect();
    let offenders: BTreeSet<i64> = dets.iter().map(|d| d.t_us).filter(|t| !instants.contains(t)).collect();
    if !offenders.is_empty() {
        return Err(Error::Format(format!(
            "detections at timestamps outside the evaluated instants: {offenders:?}"
        )));
    }
    let frames: Vec<GroundTruthFrame> = ann
        .frames
        .iter()
        .filter(|f| instants.contains(&f.t_us))
        .cloned()
        .collect();
    let have: BTreeSet<i64> = frames.iter().map(|f| f.t_us).collect();
    let missing: Vec<i64> = instants.difference(&have).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!("no annotation frame at instants {missing:?}")));
    }
    let mut rows = Vec::new();
    for class in Class::ALL {
        for difficulty in [Difficulty::Easy, Difficulty::Moderate] {
            for metric in [Metric::Ap3d, Metric::ApBev] {
                let r = eval::ap_compute(dets, &frames, class, cfg.iou_thresholds.get(class), difficulty, metric)?;
                rows.push(ResultRow {
                    class,
                    difficulty,
                    metric,
                    motion_scale: cfg.motion_scale,
                    time_slice: cfg.time_slice,
                    value: r.value,
                });
            }
        }
    }
    Ok(rows)
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from("class,difficulty,metric,motion_scale,time_slice,value\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            r.class.name(),
            r.difficulty.name(),
            r.metric.name(),
            r.motion_scale,
            r.time_slice,
            r.value
        ));
    }
    s
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dets: Vec<Detection> = serde_json::from_str(&text)?;
    for d in &dets {
        d.bbox.validate()?;
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Format(format!("detection score {} outside [0, 1]", d.score)));
        }
    }
    Ok(dets)
}

pub fn cmd_eval(cfg: &RunConfig, detections: &Path, out: &Path) -> Result<Vec<ResultRow>> {
    let dets = read_detections(detections)?;
    let ann = read_annotations(&cfg.annotations)?;
    let instants = eval_instants(cfg, &ann)?;
    let rows = evaluate(cfg, &dets, &ann, &instants)?;
    write_bytes(out, results_csv(&rows).as_bytes())?;
    Ok(rows)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<CheckEntry>,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&CheckEntry> {
        self.entries.iter().filter(|e| !e.passed()).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let status = if e.passed() { "ok" } else { "FAIL" };
            s.push_str(&format!("{:<34} {:.3e} {status}\n", e.path, e.rel_error));
        }
        s
    }
}

/// Every primitive plus every module path; `fault` corrupts one op's backward.
pub fn cmd_gradcheck(seed: u64, fault: Option<&str>) -> Result<GradcheckReport> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::invalid(format!("unknown op {name}")))?),
    };
    Ok(GradcheckReport {
        entries: gradsuite::full_suite(seed, fault)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig {
            model: ModelConfig::desk(),
            ..RunConfig::for_dataset(Path::new("data"), Path::new("w"))
        }
    }

    #[test]
    fn config_round_trip_is_idempotent() {
        let c = cfg();
        let once = c.to_json().unwrap();
        let twice = RunConfig::from_json(&once).unwrap().to_json().unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn rejects_unevaluated_settings() {
        let mut c = cfg();
        c.motion_scale = 3;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.time_slice = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn instants_cover_whole_periods() {
        let c = cfg();
        let (got, skipped) = c.instants(200_000).unwrap();
        assert_eq!(got, (1..=20).map(|k| k * 10_000).collect::<Vec<_>>());
        assert!(skipped.is_empty());
        let c = RunConfig {
            stream_start_us: 5_000,
            ..cfg()
        };
        let (got, skipped) = c.instants(100_000).unwrap();
        assert_eq!(skipped, vec![10_000]);
        assert_eq!(got.len(), 9);
    }

    #[test]
    fn coarse_instants_are_a_subset_of_fine_ones() {
        let coarse = cfg().instants(300_000).unwrap().0;
        let fine = RunConfig {
            time_slice: 20,
            ..cfg()
        }
        .instants(300_000)
        .unwrap()
        .0;
        assert!(coarse.iter().all(|t| fine.contains(t)));
    }

    #[test]
    fn total_column_is_component_sum() {
        let b = LossBreakdown {
            depth_init: 1.0,
            depth_refine: 2.0,
            aux_2d: 0.5,
            cls: 0.25,
            reg_global: 0.125,
            reg_local: 0.0625,
            total: 3.9375,
        };
        let row = loss_log_row(3, &b);
        let v: Vec<f64> = row.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[..6].iter().sum::<f64>(), v[6]);
        assert_eq!(loss_log_header().split(',').count(), 8);
    }
}
