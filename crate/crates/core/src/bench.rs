//! End-to-end benchmark harness: configuration, the per-window pipeline,
//! parallel execution and report files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Vec3};
use crate::metrics::{evaluate_window, BenchmarkReport, Metric, MetricThresholds, WindowScore};
use crate::rng;
use crate::scene::{occlude_window, subsample_frames, synthesize_window, ObjectModel, ShapeKind, SynthConfig};
use crate::sfm::{estimate_window_poses, SfmConfig};
use crate::trackersim::{attach_logits, corrupt_tracks, NoiseProfile};
use crate::trajgen::{generate_trajectory, Trajectory, TrajectoryParams};
use crate::uncertainty::{select_keypoints, SelectionStrategy, DEFAULT_KEEP_RATIO};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "POSEBENCH_THREADS";

pub const REPORT_JSON: &str = "report.json";
pub const AP_CSV: &str = "ap_table.csv";
pub const PLOT_CSV: &str = "plot_data.csv";

/// Points per threshold sweep in the plot-data file.
const SWEEP_STEPS: usize = 50;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Serialize(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectConfig {
    pub shape: ShapeKind,
    pub num_points: usize,
    /// Semi-axes (m); a sphere uses the first component as its radius.
    pub size: [f64; 3],
}

impl Default for ObjectConfig {
    fn default() -> Self {
        Self { shape: ShapeKind::Sphere, num_points: 200, size: [0.1, 0.1, 0.1] }
    }
}

impl ObjectConfig {
    pub fn build(&self) -> Result<ObjectModel, BenchError> {
        let s = Vec3::from(self.size);
        let model = match self.shape {
            ShapeKind::Sphere => ObjectModel::sphere(self.num_points, s.x),
            ShapeKind::Ellipsoid => ObjectModel::ellipsoid(self.num_points, s),
            ShapeKind::BoxCloud => ObjectModel::box_cloud(self.num_points, s),
            ShapeKind::Imported => return Err(BenchError::Config("imported object models are not generated".into())),
        };
        model.map_err(|e| BenchError::Config(e.to_string()))
    }
}

/// How windows are cut out of each generated trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub num_frames: usize,
    /// Largest gap between consecutive sampled frames.
    pub max_gap: usize,
    pub windows_per_seed: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { num_frames: 8, max_gap: 4, windows_per_seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    /// Per-frame probability of drawing occluders.
    pub p_occlude: f64,
    pub num_disks: usize,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self { p_occlude: 0.3, num_disks: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Row label in reports; defaults to the selection strategy name.
    pub method: Option<String>,
    pub trajectory: TrajectoryParams,
    pub object: ObjectConfig,
    pub intrinsics: CameraIntrinsics,
    pub synth: SynthConfig,
    pub window: WindowConfig,
    pub occlusion: OcclusionConfig,
    pub noise: NoiseProfile,
    pub strategy: SelectionStrategy,
    pub keep_ratio: f64,
    pub sfm: SfmConfig,
    pub thresholds: MetricThresholds,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            method: None,
            trajectory: TrajectoryParams::default(),
            object: ObjectConfig::default(),
            intrinsics: CameraIntrinsics::default(),
            synth: SynthConfig::default(),
            window: WindowConfig::default(),
            occlusion: OcclusionConfig::default(),
            noise: NoiseProfile::noiseless(),
            strategy: SelectionStrategy::None,
            keep_ratio: DEFAULT_KEEP_RATIO,
            sfm: SfmConfig::default(),
            thresholds: MetricThresholds::default(),
            seeds: vec![0],
            output_dir: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        self.trajectory.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        self.intrinsics.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        self.noise.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        self.sfm.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        self.thresholds.validate().map_err(BenchError::Config)?;
        self.object.build()?;
        let w = &self.window;
        if w.num_frames < 2 || w.max_gap == 0 || w.windows_per_seed == 0 {
            return bad("windows need >= 2 frames, a positive gap and >= 1 window per seed".into());
        }
        if (w.num_frames - 1) * 1 + 1 > self.trajectory.num_frames {
            return bad(format!(
                "trajectory of {} frames cannot hold a {}-frame window",
                self.trajectory.num_frames, w.num_frames
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion.p_occlude) {
            return bad("p_occlude must lie in [0, 1]".into());
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return bad("keep_ratio must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn method_name(&self) -> String {
        self.method.clone().unwrap_or_else(|| self.strategy.name().to_string())
    }
}

/// Provenance of one scored window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub seed: u64,
    pub window: usize,
    /// Trajectory frame indices of the window.
    pub frames: Vec<usize>,
}

/// Everything a benchmark run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub report: BenchmarkReport,
    /// Aligned with `report.scores`.
    pub windows: Vec<WindowRecord>,
}

/// Seed for one stage of one window, decorrelated from the run seed.
pub fn window_seed(seed: u64, window: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (window as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Ground truth and estimate inputs for one window, before pose estimation.
pub struct PreparedWindow {
    pub record: WindowRecord,
    pub gt: Trajectory,
    pub tracks: crate::tracks::TrackSet,
    pub kept: Vec<Vec<u32>>,
}

fn prepare_window(
    cfg: &BenchConfig,
    model: &ObjectModel,
    traj: &Trajectory,
    seed: u64,
    window: usize,
) -> Result<PreparedWindow, String> {
    let wseed = window_seed(seed, window);
    let mut sub_rng = rng::seeded(wseed, rng::stream::SUBSAMPLE);
    let frames = subsample_frames(traj.len(), cfg.window.num_frames, cfg.window.max_gap, &mut sub_rng)
        .map_err(|e| e.to_string())?;
    let gt = traj.select(&frames).map_err(|e| e.to_string())?;
    let record = WindowRecord { seed, window, frames };
    let synth = synthesize_window(model, &gt, &cfg.intrinsics, &cfg.synth).map_err(|e| e.to_string())?;
    let (_, occluded) = if cfg.occlusion.p_occlude > 0.0 {
        occlude_window(&synth.masks, &synth.tracks, cfg.occlusion.p_occlude, cfg.occlusion.num_disks, wseed)
            .map_err(|e| e.to_string())?
    } else {
        (synth.masks, synth.tracks)
    };
    let profile = NoiseProfile { seed: wseed, ..cfg.noise.clone() };
    let corrupted = corrupt_tracks(&occluded, &profile).map_err(|e| e.to_string())?;
    let tracks = attach_logits(&corrupted, &profile).map_err(|e| e.to_string())?;
    let kept = select_keypoints(&tracks, cfg.strategy, cfg.keep_ratio).map_err(|e| e.to_string())?;
    Ok(PreparedWindow { record, gt, tracks, kept })
}

fn run_window(
    cfg: &BenchConfig,
    model: &ObjectModel,
    traj: &Result<Trajectory, String>,
    seed: u64,
    window: usize,
) -> (WindowRecord, WindowScore) {
    let empty = WindowRecord { seed, window, frames: Vec::new() };
    let traj = match traj {
        Ok(t) => t,
        Err(e) => return (empty, WindowScore::failed(format!("trajectory: {e}"))),
    };
    let prepared = match prepare_window(cfg, model, traj, seed, window) {
        Ok(p) => p,
        Err(e) => return (empty, WindowScore::failed(format!("synthesis: {e}"))),
    };
    let sfm = SfmConfig { seed: window_seed(seed, window), ..cfg.sfm };
    let score = match estimate_window_poses(&prepared.tracks, &prepared.kept, &cfg.intrinsics, &sfm) {
        Ok(recon) => evaluate_window(&recon, &prepared.gt),
        Err(e) => WindowScore::failed(format!("sfm: {e}")),
    };
    (prepared.record, score)
}

/// Build the inputs of one window exactly as [`run_pipeline`] does.
pub fn prepare(cfg: &BenchConfig, seed: u64, window: usize) -> Result<PreparedWindow, BenchError> {
    cfg.validate()?;
    let model = cfg.object.build()?;
    let traj = generate_trajectory(&TrajectoryParams { seed, ..cfg.trajectory })
        .map_err(|e| BenchError::Config(e.to_string()))?;
    prepare_window(cfg, &model, &traj, seed, window).map_err(BenchError::Config)
}

fn thread_limit() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

/// Run every (seed, window) through the full pipeline and aggregate the
/// scores. Solver failures are recorded in the report, not returned as
/// errors. Output order is (seed order, window index) regardless of
/// scheduling. Report files are written when `output_dir` is set.
pub fn run_pipeline(cfg: &BenchConfig) -> Result<BenchOutput, BenchError> {
    cfg.validate()?;
    let model = cfg.object.build()?;
    let jobs: Vec<(u64, usize)> =
        cfg.seeds.iter().flat_map(|&s| (0..cfg.window.windows_per_seed).map(move |w| (s, w))).collect();
    let work = || -> Vec<(WindowRecord, WindowScore)> {
        let trajs: Vec<Result<Trajectory, String>> = cfg
            .seeds
            .par_iter()
            .map(|&seed| generate_trajectory(&TrajectoryParams { seed, ..cfg.trajectory }).map_err(|e| e.to_string()))
            .collect();
        jobs.par_iter()
            .map(|&(seed, window)| {
                let ti = cfg.seeds.iter().position(|&s| s == seed).expect("seed listed");
                run_window(cfg, &model, &trajs[ti], seed, window)
            })
            .collect()
    };
    let results = match thread_limit() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| BenchError::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    let (windows, scores): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = BenchmarkReport::from_scores(cfg.method_name(), scores, cfg.thresholds.clone());
    let output = BenchOutput { report, windows };
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, &output)?;
    }
    Ok(output)
}

/// AP table rows `method,metric,threshold,ap,num_windows,num_failures`.
pub fn ap_table_csv(reports: &[&BenchmarkReport]) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| BenchError::Serialize(e.to_string());
    w.write_record(["method", "metric", "threshold", "ap", "num_windows", "num_failures"]).map_err(ser)?;
    for r in reports {
        for e in &r.ap {
            w.write_record([
                r.method.clone(),
                e.metric.name().to_string(),
                e.threshold.to_string(),
                e.ap.to_string(),
                r.num_windows.to_string(),
                r.num_failures.to_string(),
            ])
            .map_err(ser)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| BenchError::Serialize(e.to_string()))?)
        .map_err(|e| BenchError::Serialize(e.to_string()))
}

/// Threshold-sweep curves: AP at evenly spaced thresholds from 0 to twice
/// each metric's largest configured threshold.
pub fn plot_data_csv(reports: &[&BenchmarkReport]) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| BenchError::Serialize(e.to_string());
    w.write_record(["method", "metric", "threshold", "ap"]).map_err(ser)?;
    for r in reports {
        for metric in Metric::ALL {
            let max = r.thresholds.get(metric).iter().copied().fold(0.0, f64::max);
            if max <= 0.0 {
                continue;
            }
            for i in 0..=SWEEP_STEPS {
                let tau = 2.0 * max * i as f64 / SWEEP_STEPS as f64;
                w.write_record([
                    r.method.clone(),
                    metric.name().to_string(),
                    tau.to_string(),
                    r.ap_at(metric, tau).to_string(),
                ])
                .map_err(ser)?;
            }
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| BenchError::Serialize(e.to_string()))?)
        .map_err(|e| BenchError::Serialize(e.to_string()))
}

pub fn output_to_json(output: &BenchOutput) -> Result<String, BenchError> {
    serde_json::to_string_pretty(output).map_err(|e| BenchError::Serialize(e.to_string()))
}

pub fn read_output(path: impl AsRef<Path>) -> Result<BenchOutput, BenchError> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| BenchError::Serialize(e.to_string()))
}

/// Write `report.json`, `ap_table.csv` and `plot_data.csv` into `dir`.
pub fn write_outputs(dir: &Path, output: &BenchOutput) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_JSON), output_to_json(output)?)?;
    fs::write(dir.join(AP_CSV), ap_table_csv(&[&output.report])?)?;
    fs::write(dir.join(PLOT_CSV), plot_data_csv(&[&output.report])?)?;
    Ok(())
}

/// Re-score stored window results under new thresholds.
pub fn reaggregate(output: &BenchOutput, thresholds: &MetricThresholds) -> BenchmarkReport {
    BenchmarkReport::from_scores(output.report.method.clone(), output.report.scores.clone(), thresholds.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(strategy: SelectionStrategy) -> BenchConfig {
        BenchConfig {
            strategy,
            seeds: vec![1, 2],
            occlusion: OcclusionConfig { p_occlude: 0.0, num_disks: 1 },
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_windows_score_zero() {
        let out = run_pipeline(&small(SelectionStrategy::None)).unwrap();
        let r = &out.report;
        assert_eq!(r.num_windows, 2);
        let registered = r.scores.iter().filter(|s| s.registered).count() as f64 / 2.0;
        assert_eq!(r.ap(Metric::RpeRot, 3.0), Some(registered));
        assert_eq!(out.windows.iter().map(|w| w.seed).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn strategies_share_ground_truth() {
        let a = prepare(&small(SelectionStrategy::None), 1, 0).unwrap();
        let b = prepare(&small(SelectionStrategy::ByRanking), 1, 0).unwrap();
        assert_eq!(a.gt, b.gt);
        assert!(a.tracks.bitwise_eq(&b.tracks));
    }

    #[test]
    fn csv_shape() {
        let out = run_pipeline(&small(SelectionStrategy::None)).unwrap();
        let csv = ap_table_csv(&[&out.report]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("method,metric,threshold,ap,num_windows,num_failures"));
        assert_eq!(lines.count(), 15);
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let cfg = BenchConfig { seeds: vec![], ..Default::default() };
        assert!(matches!(run_pipeline(&cfg), Err(BenchError::Config(_))));
    }
}
