//! Python bindings: poses, trajectories, track sets, the window SfM solver,
//! metrics and the end-to-end benchmark. Artifacts cross the boundary as
//! the same JSON documents the CLI reads and writes.

use nalgebra::{Quaternion, UnitQuaternion};
use posebench::bench::{ap_table_csv, output_to_json, run_pipeline, BenchConfig, ObjectConfig};
use posebench::geometry::{self, CameraIntrinsics, Mat3, Vec3};
use posebench::io;
use posebench::metrics;
use posebench::scene::{synthesize_window, ShapeKind, SynthConfig};
use posebench::sfm::{self, SfmConfig};
use posebench::trackersim::{self, NoiseProfile};
use posebench::trajgen::{self, TrajectoryMode, TrajectoryParams};
use posebench::uncertainty::{self, SelectionStrategy};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn serde_name<T: serde::de::DeserializeOwned>(s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(value_err)
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

fn rows(m: &Mat3) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]])
}

/// Rigid world-to-camera transform.
#[pyclass(name = "Pose", frozen, from_py_object)]
#[derive(Clone)]
struct PyPose(geometry::Pose);

#[pymethods]
impl PyPose {
    /// Build from a quaternion `[w, x, y, z]` (normalized here) and a translation.
    #[new]
    #[pyo3(signature = (q = [1.0, 0.0, 0.0, 0.0], t = [0.0, 0.0, 0.0]))]
    fn new(q: [f64; 4], t: [f64; 3]) -> PyResult<Self> {
        let q = Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(q.norm() > 0.0 && q.norm().is_finite()) {
            return Err(value_err("quaternion must be finite and non-zero"));
        }
        Ok(Self(geometry::Pose::from_quaternion(UnitQuaternion::from_quaternion(q), vec3(t))))
    }

    #[staticmethod]
    fn look_at(center: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Self {
        Self(geometry::Pose::look_at(&vec3(center), &vec3(target), &vec3(up)))
    }

    #[getter]
    fn quaternion(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        rows(self.0.rotation())
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.0.translation();
        [t.x, t.y, t.z]
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center().into()
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// `self ∘ other`: apply `other` first.
    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform(&vec3(p)).into()
    }

    fn __repr__(&self) -> String {
        format!("Pose(q={:?}, t={:?})", self.quaternion(), self.translation())
    }
}

/// Ordered camera poses.
#[pyclass(name = "Trajectory", frozen, from_py_object)]
#[derive(Clone)]
struct PyTrajectory(trajgen::Trajectory);

#[pymethods]
impl PyTrajectory {
    #[new]
    fn new(poses: Vec<PyPose>) -> PyResult<Self> {
        trajgen::Trajectory::from_poses(poses.into_iter().map(|p| p.0).collect()).map(Self).map_err(value_err)
    }

    /// Generate a synthetic trajectory (`circling`, `random_walk` or `noisy_circle`).
    #[staticmethod]
    #[pyo3(signature = (mode = "circling", num_frames = 100, seed = 0, radius = 0.6))]
    fn generate(mode: &str, num_frames: usize, seed: u64, radius: f64) -> PyResult<Self> {
        let params = TrajectoryParams {
            mode: serde_name::<TrajectoryMode>(mode)?,
            num_frames,
            seed,
            radius,
            ..Default::default()
        };
        trajgen::generate_trajectory(&params).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        io::parse_trajectory(text).map(|t| Self(t.trajectory)).map_err(value_err)
    }

    fn to_json(&self) -> String {
        io::trajectory_to_json(&self.0)
    }

    #[getter]
    fn poses(&self) -> Vec<PyPose> {
        self.0.poses().iter().cloned().map(PyPose).collect()
    }

    #[getter]
    fn frame_indices(&self) -> Vec<usize> {
        self.0.frame_indices().to_vec()
    }

    /// Sub-trajectory at the given positions.
    fn select(&self, positions: Vec<usize>) -> PyResult<Self> {
        self.0.select(&positions).map(Self).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Per-frame 2D tracks of a set of points.
#[pyclass(name = "TrackSet", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTrackSet(posebench::tracks::TrackSet);

#[pymethods]
impl PyTrackSet {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        io::parse_trackset(text).map(Self).map_err(value_err)
    }

    fn to_json(&self) -> String {
        io::trackset_to_json(&self.0)
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.0.num_frames()
    }

    #[getter]
    fn point_ids(&self) -> Vec<u32> {
        self.0.point_ids().to_vec()
    }

    /// Pixel position of point `point` (index, not id) in `frame`.
    fn position(&self, frame: usize, point: usize) -> PyResult<(f64, f64)> {
        if frame >= self.0.num_frames() || point >= self.0.num_points() {
            return Err(value_err("frame or point index out of range"));
        }
        let p = self.0.position(frame, point);
        Ok((p.x, p.y))
    }

    fn visible(&self, frame: usize, point: usize) -> PyResult<bool> {
        if frame >= self.0.num_frames() || point >= self.0.num_points() {
            return Err(value_err("frame or point index out of range"));
        }
        Ok(self.0.visible(frame, point))
    }

    fn __len__(&self) -> usize {
        self.0.num_points()
    }
}

/// Window reconstruction returned by the SfM solver.
#[pyclass(name = "Reconstruction", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyReconstruction(sfm::Reconstruction);

#[pymethods]
impl PyReconstruction {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        io::parse_reconstruction(text).map(Self).map_err(value_err)
    }

    fn to_json(&self) -> String {
        io::reconstruction_to_json(&self.0)
    }

    /// One entry per frame; `None` where registration failed.
    #[getter]
    fn poses(&self) -> Vec<Option<PyPose>> {
        self.0.poses.iter().map(|p| p.clone().map(PyPose)).collect()
    }

    #[getter]
    fn rmse(&self) -> f64 {
        self.0.rmse
    }

    #[getter]
    fn num_registered(&self) -> usize {
        self.0.num_registered()
    }

    #[getter]
    fn num_landmarks(&self) -> usize {
        self.0.landmarks.len()
    }
}

/// Ground-truth tracks of a synthetic object rendered along `trajectory`.
#[pyfunction]
#[pyo3(signature = (trajectory, shape = "sphere", num_points = 200, size = [0.1, 0.1, 0.1]))]
fn synthesize_tracks(
    trajectory: &PyTrajectory,
    shape: &str,
    num_points: usize,
    size: [f64; 3],
) -> PyResult<PyTrackSet> {
    let model = ObjectConfig { shape: serde_name::<ShapeKind>(shape)?, num_points, size }.build().map_err(value_err)?;
    let window = synthesize_window(&model, &trajectory.0, &CameraIntrinsics::default(), &SynthConfig::default())
        .map_err(value_err)?;
    Ok(PyTrackSet(window.tracks))
}

/// Corrupt tracks with Gaussian noise (`sigma`) or a single quality level
/// (`level`), then attach uncertainty logits.
#[pyfunction]
#[pyo3(signature = (tracks, sigma = None, level = None, seed = 0))]
fn corrupt_tracks(tracks: &PyTrackSet, sigma: Option<f64>, level: Option<u8>, seed: u64) -> PyResult<PyTrackSet> {
    let base = match (sigma, level) {
        (Some(_), Some(_)) => return Err(value_err("pass at most one of sigma and level")),
        (Some(s), None) => NoiseProfile::gaussian(s),
        (None, Some(l)) => NoiseProfile::single_level(l),
        (None, None) => NoiseProfile::noiseless(),
    };
    let profile = NoiseProfile { seed, ..base };
    profile.validate().map_err(value_err)?;
    let noisy = trackersim::corrupt_tracks(&tracks.0, &profile).map_err(value_err)?;
    trackersim::attach_logits(&noisy, &profile).map(PyTrackSet).map_err(value_err)
}

/// Per-frame kept point ids under `strategy` (`none`, `by_level`, `by_ranking`).
#[pyfunction]
#[pyo3(signature = (tracks, strategy = "by_ranking", keep_ratio = uncertainty::DEFAULT_KEEP_RATIO))]
fn select_keypoints(tracks: &PyTrackSet, strategy: &str, keep_ratio: f64) -> PyResult<Vec<Vec<u32>>> {
    uncertainty::select_keypoints(&tracks.0, serde_name::<SelectionStrategy>(strategy)?, keep_ratio).map_err(value_err)
}

/// Window SfM with default intrinsics; `kept` defaults to every visible point.
#[pyfunction]
#[pyo3(signature = (tracks, kept = None, seed = 0))]
fn estimate_window_poses(tracks: &PyTrackSet, kept: Option<Vec<Vec<u32>>>, seed: u64) -> PyResult<PyReconstruction> {
    let kept = match kept {
        Some(k) => k,
        None => uncertainty::select_keypoints(&tracks.0, SelectionStrategy::None, 1.0).map_err(value_err)?,
    };
    let cfg = SfmConfig { seed, ..Default::default() };
    sfm::estimate_window_poses(&tracks.0, &kept, &CameraIntrinsics::default(), &cfg)
        .map(PyReconstruction)
        .map_err(value_err)
}

/// Window score as a JSON document (metrics after similarity alignment).
#[pyfunction]
fn evaluate_window(reconstruction: &PyReconstruction, gt: &PyTrajectory) -> PyResult<String> {
    serde_json::to_string(&metrics::evaluate_window(&reconstruction.0, &gt.0)).map_err(value_err)
}

/// Closed-form similarity `(scale, rotation rows, translation)` mapping source onto target.
#[pyfunction]
fn umeyama_align(source: Vec<[f64; 3]>, target: Vec<[f64; 3]>) -> PyResult<(f64, [[f64; 3]; 3], [f64; 3])> {
    let src: Vec<Vec3> = source.into_iter().map(vec3).collect();
    let tgt: Vec<Vec3> = target.into_iter().map(vec3).collect();
    let s = geometry::umeyama_align(&src, &tgt).map_err(value_err)?;
    Ok((s.scale, rows(&s.rotation), s.translation.into()))
}

/// ATE RMSE (m) after similarity alignment of `pred` onto `gt`.
#[pyfunction]
fn ate(pred: &PyTrajectory, gt: &PyTrajectory) -> PyResult<f64> {
    let (aligned, _) = metrics::align_trajectory(&pred.0, &gt.0).map_err(value_err)?;
    metrics::ate_rmse(&aligned, &gt.0).map_err(value_err)
}

/// Mean consecutive-frame relative pose error `(metres, degrees)`.
#[pyfunction]
fn rpe(pred: &PyTrajectory, gt: &PyTrajectory) -> PyResult<(f64, f64)> {
    metrics::rpe(&pred.0, &gt.0).map_err(value_err)
}

/// Fraction of windows whose error is below `tau`; `None` entries are failures.
#[pyfunction]
fn ap_at_threshold(values: Vec<Option<f64>>, tau: f64) -> f64 {
    metrics::ap_at_threshold(&values, tau)
}

/// Run the benchmark for a JSON config; returns `(output_json, ap_table_csv)`.
#[pyfunction]
#[pyo3(signature = (config_json = "{}"))]
fn run_bench(py: Python<'_>, config_json: &str) -> PyResult<(String, String)> {
    let cfg: BenchConfig = serde_json::from_str(config_json).map_err(value_err)?;
    let out = py.detach(|| run_pipeline(&cfg)).map_err(value_err)?;
    Ok((output_to_json(&out).map_err(value_err)?, ap_table_csv(&[&out.report]).map_err(value_err)?))
}

#[pymodule]
#[pyo3(name = "posebench")]
fn posebench_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyTrackSet>()?;
    m.add_class::<PyReconstruction>()?;
    m.add_function(wrap_pyfunction!(synthesize_tracks, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt_tracks, m)?)?;
    m.add_function(wrap_pyfunction!(select_keypoints, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_window_poses, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_window, m)?)?;
    m.add_function(wrap_pyfunction!(umeyama_align, m)?)?;
    m.add_function(wrap_pyfunction!(ate, m)?)?;
    m.add_function(wrap_pyfunction!(rpe, m)?)?;
    m.add_function(wrap_pyfunction!(ap_at_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    Ok(())
}
