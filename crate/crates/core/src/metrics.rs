//! Trajectory evaluation: 7-DoF alignment, ATE, RPE, KITTI-style drift and
//! average precision below thresholds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_angle_deg, umeyama_align, GeometryError, Pose, SimilarityTransform};
use crate::sfm::Reconstruction;
use crate::trajgen::Trajectory;

/// Sub-sequence proportions of the total ground-truth path length.
pub const KITTI_PROPORTIONS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
/// Ground-truth paths shorter than this (m) cannot be scored for drift.
pub const MIN_PATH_LENGTH: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("trajectory lengths differ: prediction {pred}, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("need at least {needed} poses, got {available}")]
    TooShort { needed: usize, available: usize },
    #[error("ground-truth path length {length:.3e} m is too short")]
    PathTooShort { length: f64 },
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn check_lengths(pred: &Trajectory, gt: &Trajectory, needed: usize) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if gt.len() < needed {
        return Err(MetricsError::TooShort { needed, available: gt.len() });
    }
    Ok(())
}

/// Similarity that best maps predicted camera centers onto ground truth,
/// and the prediction expressed in the ground-truth frame.
pub fn align_trajectory(pred: &Trajectory, gt: &Trajectory) -> Result<(Trajectory, SimilarityTransform), MetricsError> {
    check_lengths(pred, gt, 3)?;
    let sim = umeyama_align(&pred.centers(), &gt.centers())?;
    Ok((pred.transform_similarity(&sim), sim))
}

/// RMSE of camera-center differences (m).
pub fn ate_rmse(pred: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    check_lengths(pred, gt, 1)?;
    let sum: f64 = pred.centers().iter().zip(gt.centers()).map(|(p, g)| (p - g).norm_squared()).sum();
    Ok((sum / gt.len() as f64).sqrt())
}

/// Discrepancy between predicted and true motion from frame `i` to `j`,
/// `(Q_i⁻¹ Q_j)⁻¹ (P_i⁻¹ P_j)` on camera-to-world poses.
pub fn relative_error(pred: &[Pose], gt: &[Pose], i: usize, j: usize) -> Pose {
    let rel_p = pred[i].compose(&pred[j].inverse());
    let rel_q = gt[i].compose(&gt[j].inverse());
    rel_q.inverse().compose(&rel_p)
}

/// How per-step relative errors are reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpeAggregate {
    #[default]
    Rmse,
    Mean,
}

/// Frame-to-frame relative pose error `(m, deg)`, RMSE-aggregated.
pub fn rpe(pred: &Trajectory, gt: &Trajectory) -> Result<(f64, f64), MetricsError> {
    rpe_with(pred, gt, RpeAggregate::Rmse)
}

pub fn rpe_with(pred: &Trajectory, gt: &Trajectory, aggregate: RpeAggregate) -> Result<(f64, f64), MetricsError> {
    check_lengths(pred, gt, 2)?;
    let (p, g) = (pred.poses(), gt.poses());
    let errors: Vec<(f64, f64)> = (0..g.len() - 1)
        .map(|i| {
            let e = relative_error(p, g, i, i + 1);
            (e.translation().norm(), rotation_angle_deg(&e))
        })
        .collect();
    let n = errors.len() as f64;
    Ok(match aggregate {
        RpeAggregate::Rmse => (
            (errors.iter().map(|e| e.0 * e.0).sum::<f64>() / n).sqrt(),
            (errors.iter().map(|e| e.1 * e.1).sum::<f64>() / n).sqrt(),
        ),
        RpeAggregate::Mean => {
            (errors.iter().map(|e| e.0).sum::<f64>() / n, errors.iter().map(|e| e.1).sum::<f64>() / n)
        }
    })
}

/// One drift sample over the sub-sequence `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftSample {
    pub proportion: f64,
    pub start: usize,
    pub end: usize,
    /// Ground-truth path length of the sub-sequence (m).
    pub length: f64,
    pub t_err: f64,
    pub r_err: f64,
}

/// All drift samples: for each proportion `p` and start frame `i`, the first
/// end frame whose ground-truth path from `i` reaches `p` of the total.
pub fn kitti_samples(
    pred: &Trajectory,
    gt: &Trajectory,
    proportions: &[f64],
) -> Result<Vec<DriftSample>, MetricsError> {
    check_lengths(pred, gt, 2)?;
    let centers = gt.centers();
    let mut cumulative = vec![0.0];
    for w in centers.windows(2) {
        cumulative.push(cumulative.last().unwrap() + (w[1] - w[0]).norm());
    }
    let total = *cumulative.last().unwrap();
    if !(total > MIN_PATH_LENGTH) {
        return Err(MetricsError::PathTooShort { length: total });
    }
    let (p, g) = (pred.poses(), gt.poses());
    let mut out = Vec::new();
    for &proportion in proportions {
        let target = proportion * total;
        for start in 0..g.len() {
            let Some(end) = (start + 1..g.len()).find(|&j| cumulative[j] - cumulative[start] >= target) else {
                continue;
            };
            let length = cumulative[end] - cumulative[start];
            let e = relative_error(p, g, start, end);
            out.push(DriftSample {
                proportion,
                start,
                end,
                length,
                t_err: 100.0 * e.translation().norm() / length,
                r_err: rotation_angle_deg(&e) / length,
            });
        }
    }
    Ok(out)
}

/// Mean translational drift (%) and rotational drift (deg/m).
pub fn kitti_drift(pred: &Trajectory, gt: &Trajectory, proportions: &[f64]) -> Result<(f64, f64), MetricsError> {
    let samples = kitti_samples(pred, gt, proportions)?;
    let n = samples.len() as f64;
    Ok((samples.iter().map(|s| s.t_err).sum::<f64>() / n, samples.iter().map(|s| s.r_err).sum::<f64>() / n))
}

/// Fraction of windows that succeeded with a value at or below `tau`;
/// failures (`None`) count in the denominator only. Empty input scores 0.
pub fn ap_at_threshold(values: &[Option<f64>], tau: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| v.is_some_and(|x| x <= tau)).count() as f64 / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "t_err")]
    TErr,
    #[serde(rename = "r_err")]
    RErr,
    #[serde(rename = "ate")]
    Ate,
    #[serde(rename = "rpe_m")]
    RpeTrans,
    #[serde(rename = "rpe_deg")]
    RpeRot,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::TErr, Metric::RErr, Metric::Ate, Metric::RpeTrans, Metric::RpeRot];

    pub fn name(self) -> &'static str {
        match self {
            Metric::TErr => "t_err",
            Metric::RErr => "r_err",
            Metric::Ate => "ate",
            Metric::RpeTrans => "rpe_m",
            Metric::RpeRot => "rpe_deg",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| MetricsError::UnknownMetric(s.into()))
    }
}

/// AP thresholds per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricThresholds {
    pub t_err: Vec<f64>,
    pub r_err: Vec<f64>,
    pub ate: Vec<f64>,
    pub rpe_m: Vec<f64>,
    pub rpe_deg: Vec<f64>,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            t_err: vec![10.0, 20.0, 30.0],
            r_err: vec![30.0, 40.0, 50.0],
            ate: vec![0.01, 0.03, 0.05],
            rpe_m: vec![0.01, 0.015, 0.025],
            rpe_deg: vec![1.0, 2.0, 3.0],
        }
    }
}

impl MetricThresholds {
    pub fn get(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::TErr => &self.t_err,
            Metric::RErr => &self.r_err,
            Metric::Ate => &self.ate,
            Metric::RpeTrans => &self.rpe_m,
            Metric::RpeRot => &self.rpe_deg,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for m in Metric::ALL {
            if self.get(m).iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                return Err(format!("thresholds for {m} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Metric values of one successfully registered window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    /// Translational drift (%).
    pub t_err: f64,
    /// Rotational drift (deg/m).
    pub r_err: f64,
    /// Absolute trajectory error (m).
    pub ate: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
    pub alignment: SimilarityTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    /// Every frame recovered and scored.
    pub registered: bool,
    pub metrics: Option<WindowMetrics>,
    /// Why the window earned no credit, if it did not.
    pub failure: Option<String>,
}

impl WindowScore {
    pub fn failed(reason: impl Into<String>) -> Self {
        Self { registered: false, metrics: None, failure: Some(reason.into()) }
    }

    pub fn value(&self, metric: Metric) -> Option<f64> {
        let m = self.metrics.as_ref().filter(|_| self.registered)?;
        Some(match metric {
            Metric::TErr => m.t_err,
            Metric::RErr => m.r_err,
            Metric::Ate => m.ate,
            Metric::RpeTrans => m.rpe_trans,
            Metric::RpeRot => m.rpe_rot,
        })
    }
}

/// Score predicted poses against ground truth after one 7-DoF alignment.
pub fn score_trajectory(pred: &Trajectory, gt: &Trajectory) -> Result<WindowMetrics, MetricsError> {
    let (aligned, alignment) = align_trajectory(pred, gt)?;
    let ate = ate_rmse(&aligned, gt)?;
    let (rpe_trans, rpe_rot) = rpe(&aligned, gt)?;
    let (t_err, r_err) = kitti_drift(&aligned, gt, &KITTI_PROPORTIONS)?;
    Ok(WindowMetrics { t_err, r_err, ate, rpe_trans, rpe_rot, alignment })
}

/// Score one reconstruction; unregistered frames or scoring failures make
/// the whole window a failure.
pub fn evaluate_window(recon: &Reconstruction, gt: &Trajectory) -> WindowScore {
    if recon.poses.len() != gt.len() {
        return WindowScore::failed(format!(
            "reconstruction has {} frames, ground truth {}",
            recon.poses.len(),
            gt.len()
        ));
    }
    let Some(poses) = recon.full_poses() else {
        return WindowScore::failed(format!(
            "{} of {} frames unregistered",
            gt.len() - recon.num_registered(),
            gt.len()
        ));
    };
    let pred = match Trajectory::new(poses, gt.frame_indices().to_vec()) {
        Ok(t) => t,
        Err(e) => return WindowScore::failed(e.to_string()),
    };
    match score_trajectory(&pred, gt) {
        Ok(m) => WindowScore { registered: true, metrics: Some(m), failure: None },
        Err(e) => WindowScore::failed(e.to_string()),
    }
}

/// One row of the AP table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub metric: Metric,
    pub threshold: f64,
    pub ap: f64,
}

/// Per-window scores and the AP table built from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub method: String,
    pub thresholds: MetricThresholds,
    pub scores: Vec<WindowScore>,
    pub ap: Vec<ApEntry>,
    pub num_windows: usize,
    pub num_failures: usize,
}

impl BenchmarkReport {
    pub fn from_scores(method: impl Into<String>, scores: Vec<WindowScore>, thresholds: MetricThresholds) -> Self {
        let mut ap = Vec::new();
        for metric in Metric::ALL {
            let values: Vec<Option<f64>> = scores.iter().map(|s| s.value(metric)).collect();
            for &threshold in thresholds.get(metric) {
                ap.push(ApEntry { metric, threshold, ap: ap_at_threshold(&values, threshold) });
            }
        }
        let num_failures = scores.iter().filter(|s| !s.registered).count();
        Self { method: method.into(), thresholds, num_windows: scores.len(), num_failures, scores, ap }
    }

    pub fn ap(&self, metric: Metric, threshold: f64) -> Option<f64> {
        self.ap.iter().find(|e| e.metric == metric && e.threshold == threshold).map(|e| e.ap)
    }

    /// AP of `metric` at an arbitrary threshold, recomputed from the scores.
    pub fn ap_at(&self, metric: Metric, threshold: f64) -> f64 {
        let values: Vec<Option<f64>> = self.scores.iter().map(|s| s.value(metric)).collect();
        ap_at_threshold(&values, threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::trajgen::{generate_trajectory, TrajectoryParams};

    fn circle() -> Trajectory {
        generate_trajectory(&TrajectoryParams { num_frames: 8, ..Default::default() }).unwrap()
    }

    fn from_centers(centers: &[Vec3]) -> Trajectory {
        Trajectory::from_poses(centers.iter().map(|c| Pose::identity().with_translation(-c)).collect()).unwrap()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = circle();
        let m = score_trajectory(&gt, &gt).unwrap();
        assert!(m.ate < 1e-12 && m.rpe_trans < 1e-12 && m.rpe_rot < 1e-9 && m.t_err < 1e-9 && m.r_err < 1e-9);
        assert!((m.alignment.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaled_prediction_aligns() {
        let gt = circle();
        let sim = SimilarityTransform { scale: 3.0, ..SimilarityTransform::identity() };
        let pred = gt.transform_similarity(&sim);
        let (aligned, s) = align_trajectory(&pred, &gt).unwrap();
        assert!((s.scale - 1.0 / 3.0).abs() < 1e-12);
        assert!(ate_rmse(&aligned, &gt).unwrap() < 1e-12);
    }

    #[test]
    fn ate_hand_values() {
        let gt: Vec<Vec3> = (0..8).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let shifted: Vec<Vec3> = gt.iter().map(|c| c + Vec3::new(0.02, 0.0, 0.0)).collect();
        assert!((ate_rmse(&from_centers(&shifted), &from_centers(&gt)).unwrap() - 0.02).abs() < 1e-15);
        let alt: Vec<Vec3> =
            gt.iter().enumerate().map(|(i, c)| c + Vec3::new(0.02 * (i % 2) as f64, 0.0, 0.0)).collect();
        let v = ate_rmse(&from_centers(&alt), &from_centers(&gt)).unwrap();
        assert!((v - 0.02 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_drift_along_camera_x() {
        // Each predicted relative step carries an extra 1 cm along the
        // camera x-axis of the step's start frame.
        let gt = circle();
        let g = gt.poses();
        let mut c2w = vec![g[0].inverse()];
        for i in 0..g.len() - 1 {
            let step = g[i].compose(&g[i + 1].inverse());
            let drift = Pose::identity().with_translation(Vec3::new(0.01, 0.0, 0.0));
            c2w.push(c2w[i].compose(&drift).compose(&step));
        }
        let pred = Trajectory::from_poses(c2w.iter().map(Pose::inverse).collect()).unwrap();
        let (t, r) = rpe(&pred, &gt).unwrap();
        assert!((t - 0.01).abs() < 1e-12, "rpe_trans {t}");
        assert!(r < 1e-9);
    }

    #[test]
    fn rpe_left_invariance() {
        let gt = circle();
        let pred = generate_trajectory(&TrajectoryParams {
            num_frames: 8,
            mode: crate::trajgen::TrajectoryMode::NoisyCircle,
            ..Default::default()
        })
        .unwrap();
        let w = Pose::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 0.7, Vec3::new(1.0, 2.0, -0.5));
        let a = rpe(&pred, &gt).unwrap();
        let b = rpe(&pred.transform_world(&w), &gt.transform_world(&w)).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        let c = rpe(&gt.transform_world(&w), &gt).unwrap();
        assert!(c.0 < 1e-12 && c.1 < 1e-9);
    }

    #[test]
    fn kitti_hand_value_and_guard() {
        let gt = from_centers(&[Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]);
        let pred = from_centers(&[Vec3::zeros(), Vec3::new(1.1, 0.0, 0.0)]);
        let (t, r) = kitti_drift(&pred, &gt, &KITTI_PROPORTIONS).unwrap();
        assert!((t - 10.0).abs() < 1e-12, "t_err {t}");
        assert_eq!(r, 0.0);
        let fixed = from_centers(&[Vec3::zeros(), Vec3::zeros(), Vec3::zeros()]);
        assert!(matches!(kitti_drift(&fixed, &fixed, &KITTI_PROPORTIONS), Err(MetricsError::PathTooShort { .. })));
    }

    #[test]
    fn kitti_sample_enumeration() {
        // Unit steps: the sub-sequence for proportion p from frame i ends at
        // i + ceil(7p), and exists iff that end is inside the window.
        let centers: Vec<Vec3> = (0..8).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let gt = from_centers(&centers);
        let samples = kitti_samples(&gt, &gt, &KITTI_PROPORTIONS).unwrap();
        let expected: usize = KITTI_PROPORTIONS.iter().map(|p| 8 - ((7.0 * p - 1e-9) as f64).ceil() as usize).sum();
        assert_eq!(samples.len(), expected);
        assert!(samples.iter().all(|s| s.end > s.start && s.length >= s.proportion * 7.0 - 1e-12));
    }

    #[test]
    fn ap_counting() {
        let v = [Some(0.005), Some(0.02), Some(0.04)];
        let ap: Vec<f64> = [0.01, 0.03, 0.05].iter().map(|&t| ap_at_threshold(&v, t)).collect();
        assert_eq!(ap, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(ap_at_threshold(&[None, None], 1.0), 0.0);
        assert_eq!(ap_at_threshold(&[Some(0.005), None], 0.01), 0.5);
    }

    #[test]
    fn report_table_shape() {
        let ok = WindowScore {
            registered: true,
            metrics: Some(WindowMetrics {
                t_err: 5.0,
                r_err: 35.0,
                ate: 0.02,
                rpe_trans: 0.012,
                rpe_rot: 1.5,
                alignment: SimilarityTransform::identity(),
            }),
            failure: None,
        };
        let report =
            BenchmarkReport::from_scores("none", vec![ok, WindowScore::failed("x")], MetricThresholds::default());
        assert_eq!(report.ap.len(), 15);
        assert_eq!(report.num_failures, 1);
        assert_eq!(report.ap(Metric::Ate, 0.01), Some(0.0));
        assert_eq!(report.ap(Metric::Ate, 0.03), Some(0.5));
        assert_eq!(report.ap(Metric::RErr, 30.0), Some(0.0));
        assert_eq!(report.ap(Metric::RpeRot, 2.0), Some(0.5));
    }
}
