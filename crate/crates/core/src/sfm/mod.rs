//! Window-level structure from motion: two-view initialization, incremental
//! PnP registration and bundle adjustment.
//!
//! Everything below works in pixel and normalized image coordinates only, so
//! the recovered geometry is defined up to a similarity. The gauge is fixed
//! on every returned [`Reconstruction`]: the first registered frame is the
//! identity and the second camera of the initialization pair sits at unit
//! distance from it.

mod bundle;
mod essential;
mod pnp;
mod window;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, Pixel, Point3, Pose, Vec3};
use crate::rng::Rng;
use crate::tracks::TrackSet;
use rand::seq::index;

pub use bundle::{bundle_adjust, reprojection_cost, BaSummary, BundleConfig};
pub use essential::{
    eight_point, estimate_essential_ransac, estimate_homography_ransac, recover_relative_pose, refine_essential,
    sampson_distance, EssentialEstimate,
};
pub use pnp::{pnp_dlt, refine_pose, register_view_pnp, PnpEstimate};
pub use window::estimate_window_poses;

/// Minimum number of correspondences for the linear essential solver.
pub const MIN_ESSENTIAL_POINTS: usize = 8;
/// Minimum number of 2D-3D matches for the linear PnP solver.
pub const MIN_PNP_POINTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SfmError {
    #[error("need at least {needed} correspondences, got {available}")]
    InsufficientPoints { needed: usize, available: usize },
    #[error("no consensus: {inliers} inliers out of {total}")]
    NoConsensus { inliers: usize, total: usize },
    #[error("cheirality is ambiguous: best candidate supported by {support:.3} of points")]
    CheiralityAmbiguous { support: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid sfm input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Thresholds and solver settings for window reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmConfig {
    /// Sampson inlier threshold for the essential matrix (px).
    pub tau_sampson_px: f64,
    /// Reprojection inlier threshold for PnP and landmark filtering (px).
    pub tau_pnp_px: f64,
    pub confidence: f64,
    pub max_iters: usize,
    pub min_inliers: usize,
    pub min_inlier_ratio: f64,
    /// Initialization pairs whose median triangulation angle is below this are degenerate (deg).
    pub min_init_angle_deg: f64,
    /// Minimum triangulation angle for a new landmark (deg).
    pub min_landmark_angle_deg: f64,
    /// A pair counts as planar/rotational when a homography explains this
    /// fraction of its essential inliers.
    pub homography_ratio: f64,
    pub bundle: BundleConfig,
    pub seed: u64,
}

impl Default for SfmConfig {
    fn default() -> Self {
        Self {
            tau_sampson_px: 1.5,
            tau_pnp_px: 2.0,
            confidence: 0.999,
            max_iters: 1000,
            min_inliers: 12,
            min_inlier_ratio: 0.3,
            min_init_angle_deg: 1.0,
            min_landmark_angle_deg: 1.0,
            homography_ratio: 0.9,
            bundle: BundleConfig::default(),
            seed: 0,
        }
    }
}

impl SfmConfig {
    pub fn validate(&self) -> Result<(), SfmError> {
        let bad = |m: &str| Err(SfmError::InvalidInput(m.into()));
        if !(self.tau_sampson_px > 0.0 && self.tau_pnp_px > 0.0) {
            return bad("inlier thresholds must be positive");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_inlier_ratio) || !(0.0..=1.0).contains(&self.homography_ratio) {
            return bad("ratios must lie in [0, 1]");
        }
        if !(self.min_init_angle_deg >= 0.0 && self.min_landmark_angle_deg >= 0.0) {
            return bad("angles must be non-negative");
        }
        self.bundle.validate()
    }
}

/// One point observed (and selected) in two frames of a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point_id: u32,
    pub frame_a: usize,
    pub frame_b: usize,
    pub pixel_a: Pixel,
    pub pixel_b: Pixel,
}

/// Per-frame sets of (point id → pixel) for observations that are visible
/// and selected.
pub(crate) fn selected_observations(tracks: &TrackSet, kept: &[Vec<u32>]) -> Vec<BTreeMap<u32, Pixel>> {
    (0..tracks.num_frames())
        .map(|t| {
            kept.get(t)
                .map(|ids| {
                    ids.iter()
                        .filter_map(|&id| {
                            let i = tracks.index_of(id)?;
                            tracks.visible(t, i).then(|| (id, tracks.position(t, i)))
                        })
                        .collect()
                })
                .unwrap_or_default()
        })
        .collect()
}

/// Correspondences for all frame pairs `a < b`, ordered by (a, b, point id).
pub fn build_pairs(tracks: &TrackSet, kept: &[Vec<u32>]) -> Vec<Correspondence> {
    let obs = selected_observations(tracks, kept);
    let mut out = Vec::new();
    for a in 0..obs.len() {
        for b in a + 1..obs.len() {
            for (&point_id, &pixel_a) in &obs[a] {
                if let Some(&pixel_b) = obs[b].get(&point_id) {
                    out.push(Correspondence { point_id, frame_a: a, frame_b: b, pixel_a, pixel_b });
                }
            }
        }
    }
    out
}

/// One 2D observation of a landmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub point_id: u32,
    pub pixel: Pixel,
    pub inlier: bool,
}

/// Up-to-scale poses and structure for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// One entry per window frame; `None` for frames that failed registration.
    pub poses: Vec<Option<Pose>>,
    pub landmarks: BTreeMap<u32, Point3>,
    pub observations: Vec<Observation>,
    pub init_pair: (usize, usize),
    /// Reprojection RMSE over inlier observations (px).
    pub rmse: f64,
    pub bundle: Option<BaSummary>,
}

impl Reconstruction {
    /// First registered frame; fixed to the identity.
    pub fn gauge_frame(&self) -> Option<usize> {
        self.poses.iter().position(Option::is_some)
    }

    /// Frame whose distance to the gauge frame fixes the scale.
    pub fn scale_frame(&self) -> usize {
        self.init_pair.1
    }

    pub fn is_fully_registered(&self) -> bool {
        self.poses.iter().all(Option::is_some)
    }

    pub fn num_registered(&self) -> usize {
        self.poses.iter().filter(|p| p.is_some()).count()
    }

    /// Poses of all frames if every frame is registered.
    pub fn full_poses(&self) -> Option<Vec<Pose>> {
        self.poses.iter().copied().collect()
    }

    /// Express the reconstruction in the canonical gauge: gauge frame at the
    /// identity, scale frame at unit distance. Landmarks move with the world.
    pub fn regauge(&mut self) -> Result<(), SfmError> {
        let g = self.gauge_frame().ok_or_else(|| SfmError::InvalidInput("no registered frame".into()))?;
        let s = self.scale_frame();
        let pose_g = self.poses[g].expect("gauge frame registered");
        let pose_s = self
            .poses
            .get(s)
            .copied()
            .flatten()
            .ok_or_else(|| SfmError::InvalidInput("scale frame unregistered".into()))?;
        if s == g {
            return Err(SfmError::InvalidInput("scale frame coincides with gauge frame".into()));
        }
        let g_inv = pose_g.inverse();
        let baseline = pose_s.compose(&g_inv).translation().norm();
        if !(baseline > 1e-12 && baseline.is_finite()) {
            return Err(SfmError::DegenerateGeometry("zero baseline between gauge and scale frames".into()));
        }
        let sigma = 1.0 / baseline;
        for (j, pose) in self.poses.iter_mut().enumerate() {
            if let Some(p) = pose {
                *p = if j == g {
                    Pose::identity()
                } else {
                    let rel = p.compose(&g_inv);
                    let mut t = rel.translation() * sigma;
                    if j == s {
                        t /= t.norm();
                    }
                    rel.with_translation(t)
                };
            }
        }
        for x in self.landmarks.values_mut() {
            *x = Point3::from(pose_g.transform(&x.coords) * sigma);
        }
        Ok(())
    }

    /// Check the gauge, landmark support and cheirality invariants.
    pub fn validate(&self) -> Result<(), SfmError> {
        let bad = |m: String| Err(SfmError::InvalidInput(m));
        let Some(g) = self.gauge_frame() else { return bad("no registered frame".into()) };
        let pose_g = self.poses[g].expect("registered");
        if pose_g != Pose::identity() {
            return bad(format!("gauge frame {g} is not the identity"));
        }
        match self.poses.get(self.scale_frame()).copied().flatten() {
            Some(p) if (p.translation().norm() - 1.0).abs() <= 1e-12 => {}
            _ => return bad("scale frame baseline is not unit".into()),
        }
        let mut support: BTreeMap<u32, usize> = BTreeMap::new();
        for o in self.observations.iter().filter(|o| o.inlier) {
            let (Some(pose), Some(x)) = (self.poses.get(o.frame).copied().flatten(), self.landmarks.get(&o.point_id))
            else {
                return bad(format!(
                    "inlier observation of point {} in frame {} has no pose or landmark",
                    o.point_id, o.frame
                ));
            };
            if pose.transform(&x.coords).z <= 0.0 {
                return bad(format!("landmark {} behind camera {}", o.point_id, o.frame));
            }
            *support.entry(o.point_id).or_default() += 1;
        }
        for id in self.landmarks.keys() {
            if support.get(id).copied().unwrap_or(0) < 2 {
                return bad(format!("landmark {id} has fewer than two inlier observations"));
            }
        }
        Ok(())
    }

    /// Reprojection residual (px) of one observation, `None` when the frame
    /// or landmark is missing or the point is behind the camera.
    pub fn residual(&self, o: &Observation, k: &CameraIntrinsics) -> Option<f64> {
        let pose = self.poses.get(o.frame).copied().flatten()?;
        let x = self.landmarks.get(&o.point_id)?;
        let (px, _) = k.project_camera(&pose.transform(&x.coords)).ok()?;
        Some((px - o.pixel).norm())
    }

    /// RMSE over inlier observations (px).
    pub fn compute_rmse(&self, k: &CameraIntrinsics) -> f64 {
        let (sum, n) = self
            .observations
            .iter()
            .filter(|o| o.inlier)
            .filter_map(|o| self.residual(o, k))
            .fold((0.0, 0usize), |(s, n), r| (s + r * r, n + 1));
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }
}

/// Hartley normalization of 2D points: centroid to origin, mean distance √2.
/// Returns the normalized points and the 3x3 transform applied.
pub(crate) fn normalize_2d(points: &[Vec3]) -> (Vec<Vec3>, nalgebra::Matrix3<f64>) {
    let n = points.len() as f64;
    let (cx, cy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    let (cx, cy) = (cx / n, cy / n);
    let mean = points.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean > 1e-15 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    let t = nalgebra::Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    (points.iter().map(|p| Vec3::new(s * (p.x - cx), s * (p.y - cy), 1.0)).collect(), t)
}

/// RANSAC iterations needed to draw one all-inlier sample of `sample_size`
/// with probability `confidence`.
pub(crate) fn adaptive_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64, cap: usize) -> usize {
    let good = inlier_ratio.powi(sample_size as i32);
    if good >= 1.0 {
        return 1;
    }
    if good <= 0.0 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - good).ln()).ceil();
    if n.is_finite() {
        (n as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Inlier mask, count and truncated quadratic (MSAC) cost of one hypothesis.
pub(crate) struct Scored {
    pub inliers: Vec<bool>,
    pub count: usize,
    pub cost: f64,
}

pub(crate) fn score(residuals: impl Iterator<Item = f64>, tau: f64) -> Scored {
    let mut inliers = Vec::new();
    let mut cost = 0.0;
    for d in residuals {
        let ok = d < tau;
        inliers.push(ok);
        cost += if ok { d * d } else { tau * tau };
    }
    let count = inliers.iter().filter(|&&b| b).count();
    Scored { inliers, count, cost }
}

fn better(a: &Scored, b: &Scored) -> bool {
    a.count > b.count || (a.count == b.count && a.cost < b.cost)
}

/// Generic hypothesize-and-verify loop. `fit` turns minimal samples into
/// hypotheses; every new best hypothesis is locally optimized by repeated
/// `refit` calls on its consensus set, which keeps noisy minimal samples
/// from dominating the estimate. Hypotheses are drawn serially from one
/// seeded stream.
pub(crate) fn ransac<M: Copy>(
    n: usize,
    sample_size: usize,
    cfg: &SfmConfig,
    rng: &mut Rng,
    fit: impl Fn(&[usize]) -> Option<M>,
    refit: impl Fn(&[usize]) -> Option<M>,
    eval: impl Fn(&M) -> Scored,
) -> Option<(M, Scored, usize)> {
    let polish = |mut model: M, mut s: Scored| {
        for _ in 0..5 {
            let idx: Vec<usize> = (0..n).filter(|&i| s.inliers[i]).collect();
            if idx.len() <= sample_size {
                break;
            }
            let Some(refit) = refit(&idx) else { break };
            let rs = eval(&refit);
            if !better(&rs, &s) {
                break;
            }
            let changed = rs.inliers != s.inliers;
            model = refit;
            s = rs;
            if !changed {
                break;
            }
        }
        (model, s)
    };
    let mut best: Option<(M, Scored)> = None;
    let mut needed = cfg.max_iters;
    let mut iters = 0;
    while iters < needed.min(cfg.max_iters) {
        iters += 1;
        let sample = index::sample(rng, n, sample_size).into_vec();
        let Some(model) = fit(&sample) else { continue };
        let s = eval(&model);
        if best.as_ref().is_none_or(|(_, b)| better(&s, b)) {
            let (model, s) = polish(model, s);
            needed = adaptive_iterations(s.count as f64 / n as f64, sample_size, cfg.confidence, cfg.max_iters);
            best = Some((model, s));
        }
    }
    let (model, s) = best?;
    Some((model, s, iters))
}

/// Null vector of a stacked linear system, padding with zero rows so the
/// SVD always yields the full right singular basis.
pub(crate) fn null_vector(rows: &[Vec<f64>], cols: usize) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = rows.len().max(cols);
    let mut a = DMatrix::<f64>::zeros(n, cols);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = SVD::new(a, false, true);
    let v_t = svd.v_t?;
    let (imin, _) = svd.singular_values.argmin();
    Some((v_t.row(imin).transpose(), svd.singular_values))
}


#[cfg(test)]
pub(crate) mod fixtures {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::Correspondence;
    use crate::geometry::{project, CameraIntrinsics, Point3, Pose, Vec3};

    /// Uniform points in a cube of side 1 around the origin.
    pub fn cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect()
    }

    /// Two cameras three units from the origin, 15 degrees apart.
    pub fn two_view_poses() -> (Pose, Pose) {
        let a = Pose::look_at(&Vec3::new(0.0, 0.0, -3.0), &Vec3::zeros(), &Vec3::y());
        let cb = Vec3::new(3.0 * 15f64.to_radians().sin(), 0.3, -3.0 * 15f64.to_radians().cos());
        let b = Pose::look_at(&cb, &Vec3::new(0.05, -0.02, 0.0), &Vec3::y());
        (a, b)
    }

    /// Cameras on a ring looking at the origin.
    pub fn ring_poses(n: usize, radius: f64, arc_deg: f64) -> Vec<Pose> {
        (0..n)
            .map(|i| {
                let a = (arc_deg * i as f64 / (n - 1).max(1) as f64).to_radians();
                let c = Vec3::new(radius * a.sin(), 0.2 * (i as f64).sin(), -radius * a.cos());
                Pose::look_at(&c, &Vec3::zeros(), &Vec3::y())
            })
            .collect()
    }

    pub fn correspondences(points: &[Point3], a: &Pose, b: &Pose, k: &CameraIntrinsics) -> Vec<Correspondence> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| Correspondence {
                point_id: i as u32,
                frame_a: 0,
                frame_b: 1,
                pixel_a: project(p, a, k).unwrap().pixel,
                pixel_b: project(p, b, k).unwrap().pixel,
            })
            .collect()
    }
}
