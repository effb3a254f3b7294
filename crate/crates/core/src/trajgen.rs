//! Camera/object motion generation: random walk, circling camera, noisy
//! circling camera, and imported trajectories.

use std::path::Path;

use nalgebra::UnitQuaternion;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, SimilarityTransform, Vec3};
use crate::io;
use crate::rng;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid trajectory parameters: {0}")]
    InvalidParams(String),
    #[error("malformed trajectory file: {0}")]
    Parse(String),
    #[error("frame {frame}: invalid pose ({reason})")]
    InvalidPose { frame: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Time-ordered world-to-camera poses with strictly increasing frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
    frame_indices: Vec<usize>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>, frame_indices: Vec<usize>) -> Result<Self, TrajectoryError> {
        if poses.is_empty() {
            return Err(TrajectoryError::InvalidParams("trajectory is empty".into()));
        }
        if poses.len() != frame_indices.len() {
            return Err(TrajectoryError::InvalidParams(format!(
                "{} poses but {} frame indices",
                poses.len(),
                frame_indices.len()
            )));
        }
        if frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrajectoryError::InvalidParams("frame indices must be strictly increasing".into()));
        }
        for (i, p) in poses.iter().enumerate() {
            if !p.is_valid(1e-9) {
                return Err(TrajectoryError::InvalidPose { frame: i, reason: "not a rigid transform".into() });
            }
        }
        Ok(Self { poses, frame_indices })
    }

    /// Trajectory indexed `0..n`.
    pub fn from_poses(poses: Vec<Pose>) -> Result<Self, TrajectoryError> {
        let idx = (0..poses.len()).collect();
        Self::new(poses, idx)
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.poses.iter().map(Pose::center).collect()
    }

    /// Sub-trajectory at the given positions (not frame indices).
    pub fn select(&self, positions: &[usize]) -> Result<Self, TrajectoryError> {
        let poses = positions.iter().map(|&i| self.poses[i]).collect();
        let idx = positions.iter().map(|&i| self.frame_indices[i]).collect();
        Self::new(poses, idx)
    }

    /// Re-expresses the trajectory in a new world frame: every camera-to-world
    /// pose is left-composed with `w`.
    pub fn transform_world(&self, w: &Pose) -> Self {
        let w_inv = w.inverse();
        Self {
            poses: self.poses.iter().map(|p| p.compose(&w_inv)).collect(),
            frame_indices: self.frame_indices.clone(),
        }
    }

    /// Applies a similarity to the world frame: centers map to `s R c + t`,
    /// camera orientations are rotated by `R`.
    pub fn transform_similarity(&self, sim: &SimilarityTransform) -> Self {
        let poses = self
            .poses
            .iter()
            .map(|p| {
                let r = p.rotation() * sim.rotation.transpose();
                let c = sim.apply(&p.center());
                Pose::from_rotation_matrix(&r, -(r * c))
            })
            .collect();
        Self { poses, frame_indices: self.frame_indices.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryMode {
    RandomWalk,
    Circling,
    NoisyCircle,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryParams {
    pub mode: TrajectoryMode,
    pub num_frames: usize,
    /// Per-axis translation step (m).
    pub step_sigma_t: f64,
    /// Rotation step (deg) about a uniformly random axis.
    pub step_sigma_r: f64,
    /// Camera distance from the object origin (m).
    pub radius: f64,
    pub height_range: (f64, f64),
    pub noise_sigma_t: f64,
    pub noise_sigma_r: f64,
    pub seed: u64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            mode: TrajectoryMode::Circling,
            num_frames: 100,
            step_sigma_t: 0.01,
            step_sigma_r: 2.0,
            radius: 0.6,
            height_range: (0.0, 0.4),
            noise_sigma_t: 0.02,
            noise_sigma_r: 1.0,
            seed: 0,
        }
    }
}

impl TrajectoryParams {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let bad = |m: String| Err(TrajectoryError::InvalidParams(m));
        if self.num_frames < 2 {
            return bad(format!("num_frames must be >= 2, got {}", self.num_frames));
        }
        for (name, v) in [
            ("step_sigma_t", self.step_sigma_t),
            ("step_sigma_r", self.step_sigma_r),
            ("noise_sigma_t", self.noise_sigma_t),
            ("noise_sigma_r", self.noise_sigma_r),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad(format!("radius must be positive, got {}", self.radius));
        }
        if !(self.height_range.0.is_finite() && self.height_range.1.is_finite()) {
            return bad("height_range must be finite".into());
        }
        Ok(())
    }
}

/// Generates a trajectory for any synthetic mode. Deterministic in `params.seed`.
pub fn generate_trajectory(params: &TrajectoryParams) -> Result<Trajectory, TrajectoryError> {
    params.validate()?;
    let poses = match params.mode {
        TrajectoryMode::RandomWalk => random_walk(params),
        TrajectoryMode::Circling => circling(params),
        TrajectoryMode::NoisyCircle => noisy_circle(params),
        TrajectoryMode::Imported => {
            return Err(TrajectoryError::InvalidParams("imported trajectories are read with import_trajectory".into()))
        }
    };
    Trajectory::from_poses(poses)
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated non-negative")
}

/// Fixed camera on the +x axis looking at the origin; the object performs
/// cumulative Gaussian steps. Rotation steps are world-frame (left) perturbations
/// about the object's own origin.
fn random_walk(params: &TrajectoryParams) -> Vec<Pose> {
    let mut rng = rng::seeded(params.seed, rng::stream::TRAJECTORY);
    let camera = Pose::look_at(&Vec3::new(params.radius, 0.0, 0.0), &Vec3::zeros(), &Vec3::z());
    let step_t = gaussian(params.step_sigma_t);
    let step_r = gaussian(params.step_sigma_r.to_radians());

    let mut orientation = UnitQuaternion::identity();
    let mut position = Vec3::zeros();
    let mut poses = Vec::with_capacity(params.num_frames);
    for i in 0..params.num_frames {
        if i > 0 {
            let axis = nalgebra::Unit::new_unchecked(rng::unit_vector(&mut rng));
            let angle = step_r.sample(&mut rng);
            orientation = UnitQuaternion::from_axis_angle(&axis, angle) * orientation;
            let dt = Vec3::new(step_t.sample(&mut rng), step_t.sample(&mut rng), step_t.sample(&mut rng));
            position += dt;
        }
        let object = Pose::from_quaternion(orientation, position);
        poses.push(camera.compose(&object));
    }
    poses
}

fn circle_center(params: &TrajectoryParams, i: usize) -> Vec3 {
    let n = params.num_frames;
    let phi = std::f64::consts::TAU * i as f64 / n as f64;
    let (h0, h1) = params.height_range;
    let h = h0 + (h1 - h0) * i as f64 / (n - 1) as f64;
    Vec3::new(params.radius * phi.cos(), params.radius * phi.sin(), h)
}

fn circling(params: &TrajectoryParams) -> Vec<Pose> {
    (0..params.num_frames).map(|i| Pose::look_at(&circle_center(params, i), &Vec3::zeros(), &Vec3::z())).collect()
}

fn noisy_circle(params: &TrajectoryParams) -> Vec<Pose> {
    let mut rng = rng::seeded(params.seed, rng::stream::TRAJECTORY);
    let noise_t = gaussian(params.noise_sigma_t);
    let noise_r = gaussian(params.noise_sigma_r.to_radians());
    (0..params.num_frames)
        .map(|i| {
            let mut center = circle_center(params, i);
            if params.noise_sigma_t > 0.0 {
                center += Vec3::new(noise_t.sample(&mut rng), noise_t.sample(&mut rng), noise_t.sample(&mut rng));
            }
            let pose = Pose::look_at(&center, &Vec3::zeros(), &Vec3::z());
            if params.noise_sigma_r > 0.0 {
                let omega = Vec3::new(noise_r.sample(&mut rng), noise_r.sample(&mut rng), noise_r.sample(&mut rng));
                let tilt = Pose::from_quaternion(UnitQuaternion::new(omega), Vec3::zeros());
                let r = tilt.compose(&pose);
                r.with_translation(-(r.rotation() * center))
            } else {
                pose
            }
        })
        .collect()
}

/// Result of reading a trajectory file.
#[derive(Debug, Clone)]
pub struct ImportedTrajectory {
    pub trajectory: Trajectory,
    /// Set when at least one rotation needed re-normalization within tolerance.
    pub renormalized: bool,
}

/// Reads a trajectory file (see [`crate::io::TrajectoryFile`]).
pub fn import_trajectory(path: impl AsRef<Path>) -> Result<ImportedTrajectory, TrajectoryError> {
    let text = std::fs::read_to_string(path)?;
    io::parse_trajectory(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, CameraIntrinsics, Point3};

    fn params(mode: TrajectoryMode) -> TrajectoryParams {
        TrajectoryParams { mode, num_frames: 12, seed: 7, ..Default::default() }
    }

    #[test]
    fn zero_step_random_walk_is_static() {
        let p = TrajectoryParams { step_sigma_t: 0.0, step_sigma_r: 0.0, ..params(TrajectoryMode::RandomWalk) };
        let t = generate_trajectory(&p).unwrap();
        assert!(t.poses().iter().all(|q| q == &t.poses()[0]));
    }

    #[test]
    fn four_frame_circle_hits_compass_points() {
        let p = TrajectoryParams {
            num_frames: 4,
            radius: 1.0,
            height_range: (0.0, 0.0),
            ..params(TrajectoryMode::Circling)
        };
        let t = generate_trajectory(&p).unwrap();
        let expected =
            [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.0, -1.0, 0.0)];
        let k = CameraIntrinsics::default();
        for (pose, c) in t.poses().iter().zip(expected) {
            assert!((pose.center() - c).norm() < 1e-12, "{:?} vs {:?}", pose.center(), c);
            let px = project(&Point3::origin(), pose, &k).unwrap().pixel;
            assert!((px.x - k.cx).abs() < 1e-9 && (px.y - k.cy).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_noisy_circle_equals_circle() {
        let base = params(TrajectoryMode::Circling);
        let noisy = TrajectoryParams {
            mode: TrajectoryMode::NoisyCircle,
            noise_sigma_t: 0.0,
            noise_sigma_r: 0.0,
            ..base.clone()
        };
        assert_eq!(generate_trajectory(&base).unwrap(), generate_trajectory(&noisy).unwrap());
    }

    #[test]
    fn noisy_circle_differs_with_noise() {
        let base = generate_trajectory(&params(TrajectoryMode::Circling)).unwrap();
        let noisy = generate_trajectory(&params(TrajectoryMode::NoisyCircle)).unwrap();
        assert_ne!(base, noisy);
    }

    #[test]
    fn imported_mode_is_rejected_by_generator() {
        assert!(matches!(
            generate_trajectory(&params(TrajectoryMode::Imported)),
            Err(TrajectoryError::InvalidParams(_))
        ));
    }

    #[test]
    fn invalid_params() {
        let p = TrajectoryParams { num_frames: 1, ..Default::default() };
        assert!(generate_trajectory(&p).is_err());
        let p = TrajectoryParams { radius: 0.0, ..Default::default() };
        assert!(generate_trajectory(&p).is_err());
        let p = TrajectoryParams { step_sigma_r: -1.0, ..Default::default() };
        assert!(generate_trajectory(&p).is_err());
    }

    #[test]
    fn trajectory_constructor_checks_indices() {
        let poses = vec![Pose::identity(); 3];
        assert!(Trajectory::new(poses.clone(), vec![0, 2, 2]).is_err());
        assert!(Trajectory::new(poses.clone(), vec![0, 1]).is_err());
        assert!(Trajectory::new(vec![], vec![]).is_err());
        assert!(Trajectory::new(poses, vec![0, 3, 9]).is_ok());
    }
}
