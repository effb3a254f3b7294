//! JSON file formats for trajectories, track sets and reconstructions.
//!
//! Trajectory file (poses are world-to-camera, `X_cam = R X + t`):
//!
//! ```json
//! {"convention":"world_to_camera","frames":[{"idx":0,"q":[w,x,y,z],"t":[x,y,z]}]}
//! ```
//!
//! A frame may carry a row-major rotation matrix `"R"` instead of `"q"`.
//!
//! Track-set file (non-finite coordinates are written as `null`):
//!
//! ```json
//! {"num_frames":T,"points":[{"id":0,"xy":[[x,y],...],"vis":[true,...],"level":[1,...],"logits":[[...],...]}]}
//! ```

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{nearest_rotation, orthonormality_error, Mat3, Pixel, Point3, Pose, Vec3};
use crate::sfm::{BaSummary, Observation, Reconstruction};
use crate::tracks::{Logits, TrackError, TrackSet};
use crate::trajgen::{ImportedTrajectory, Trajectory, TrajectoryError};

pub const CONVENTION: &str = "world_to_camera";

/// Quaternion norm and rotation orthonormality tolerance for imported poses.
pub const IMPORT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("malformed file: {0}")]
    Parse(String),
    #[error(transparent)]
    Tracks(#[from] TrackError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for FormatError {
    fn from(e: serde_json::Error) -> Self {
        FormatError::Parse(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub convention: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub idx: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<[f64; 4]>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<[[f64; 3]; 3]>,
    pub t: [f64; 3],
}

impl From<&Trajectory> for TrajectoryFile {
    fn from(traj: &Trajectory) -> Self {
        let frames = traj
            .poses()
            .iter()
            .zip(traj.frame_indices())
            .map(|(p, &idx)| {
                let q = p.quaternion();
                let t = p.translation();
                FrameRecord { idx, q: Some([q.w, q.i, q.j, q.k]), r: None, t: [t.x, t.y, t.z] }
            })
            .collect();
        Self { convention: CONVENTION.into(), frames }
    }
}

fn frame_pose(i: usize, f: &FrameRecord, renormalized: &mut bool) -> Result<Pose, TrajectoryError> {
    let t = Vec3::from(f.t);
    if !t.iter().all(|v| v.is_finite()) {
        return Err(TrajectoryError::InvalidPose { frame: i, reason: "non-finite translation".into() });
    }
    match (f.q, f.r) {
        (Some(q), None) => {
            let q = Quaternion::new(q[0], q[1], q[2], q[3]);
            let norm = q.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > IMPORT_TOLERANCE {
                return Err(TrajectoryError::InvalidPose { frame: i, reason: format!("quaternion norm {norm}") });
            }
            // Exactly-normalized quaternions are taken verbatim so that files
            // round-trip bit for bit.
            let unit = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
                UnitQuaternion::new_unchecked(q)
            } else {
                *renormalized = true;
                UnitQuaternion::new_normalize(q)
            };
            Ok(Pose::from_quaternion(unit, t))
        }
        (None, Some(rows)) => {
            let r = Mat3::from_row_slice(&rows.concat());
            let ortho = orthonormality_error(&r);
            let det = r.determinant();
            if !ortho.is_finite() || det <= 0.0 {
                return Err(TrajectoryError::InvalidPose { frame: i, reason: format!("rotation determinant {det}") });
            }
            if ortho > IMPORT_TOLERANCE || (det - 1.0).abs() > IMPORT_TOLERANCE {
                return Err(TrajectoryError::InvalidPose {
                    frame: i,
                    reason: format!("rotation not orthonormal (error {ortho:.3e}, det {det})"),
                });
            }
            if ortho > 1e-12 {
                *renormalized = true;
                Ok(Pose::from_rotation_matrix(&nearest_rotation(&r), t))
            } else {
                Ok(Pose::from_rotation_matrix(&r, t))
            }
        }
        _ => Err(TrajectoryError::Parse(format!("frame {i}: exactly one of \"q\" or \"R\" is required"))),
    }
}

/// Parses and validates a trajectory file's contents.
pub fn parse_trajectory(text: &str) -> Result<ImportedTrajectory, TrajectoryError> {
    let file: TrajectoryFile = serde_json::from_str(text).map_err(|e| TrajectoryError::Parse(e.to_string()))?;
    if file.convention != CONVENTION {
        return Err(TrajectoryError::Parse(format!("unsupported convention {:?}", file.convention)));
    }
    if file.frames.len() < 2 {
        return Err(TrajectoryError::InvalidParams(format!("need at least 2 frames, got {}", file.frames.len())));
    }
    let mut renormalized = false;
    let poses = file
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| frame_pose(i, f, &mut renormalized))
        .collect::<Result<Vec<_>, _>>()?;
    let idx = file.frames.iter().map(|f| f.idx).collect();
    Ok(ImportedTrajectory { trajectory: Trajectory::new(poses, idx)?, renormalized })
}

pub fn trajectory_to_json(traj: &Trajectory) -> String {
    serde_json::to_string_pretty(&TrajectoryFile::from(traj)).expect("trajectory serializes")
}

pub fn write_trajectory(path: impl AsRef<Path>, traj: &Trajectory) -> Result<(), TrajectoryError> {
    std::fs::write(path, trajectory_to_json(traj))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSetFile {
    pub num_frames: usize,
    pub points: Vec<PointRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRecord {
    pub id: u32,
    pub xy: Vec<[Option<f64>; 2]>,
    pub vis: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
}

fn finite_or_null(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl From<&TrackSet> for TrackSetFile {
    fn from(ts: &TrackSet) -> Self {
        let t_n = ts.num_frames();
        let points = ts
            .point_ids()
            .iter()
            .enumerate()
            .map(|(i, &id)| PointRecord {
                id,
                xy: (0..t_n)
                    .map(|t| {
                        let p = ts.position(t, i);
                        [finite_or_null(p.x), finite_or_null(p.y)]
                    })
                    .collect(),
                vis: (0..t_n).map(|t| ts.visible(t, i)).collect(),
                level: ts.gt_levels().map(|_| (0..t_n).map(|t| ts.gt_level(t, i).unwrap()).collect()),
                logits: ts.logits().map(|_| (0..t_n).map(|t| ts.logit(t, i).unwrap().to_vec()).collect()),
            })
            .collect();
        Self { num_frames: t_n, points }
    }
}

impl TryFrom<TrackSetFile> for TrackSet {
    type Error = FormatError;

    fn try_from(file: TrackSetFile) -> Result<Self, FormatError> {
        let t_n = file.num_frames;
        let n = file.points.len();
        for p in &file.points {
            if p.xy.len() != t_n || p.vis.len() != t_n {
                return Err(FormatError::Parse(format!("point {}: expected {t_n} frames", p.id)));
            }
        }
        let has_levels = file.points.first().is_some_and(|p| p.level.is_some());
        let has_logits = file.points.first().is_some_and(|p| p.logits.is_some());
        if file.points.iter().any(|p| p.level.is_some() != has_levels || p.logits.is_some() != has_logits) {
            return Err(FormatError::Parse("levels/logits must be present for all points or none".into()));
        }
        let n_levels = file.points.first().and_then(|p| p.logits.as_ref()).and_then(|l| l.first()).map_or(0, Vec::len);

        let mut positions = Vec::with_capacity(t_n * n);
        let mut visibility = Vec::with_capacity(t_n * n);
        let mut levels = Vec::new();
        let mut logits = Vec::new();
        for t in 0..t_n {
            for p in &file.points {
                let [x, y] = p.xy[t];
                positions.push(Pixel::new(x.unwrap_or(f64::NAN), y.unwrap_or(f64::NAN)));
                visibility.push(p.vis[t]);
                if let Some(l) = &p.level {
                    levels.push(*l.get(t).ok_or_else(|| FormatError::Parse(format!("point {}: level length", p.id)))?);
                }
                if let Some(l) = &p.logits {
                    let row = l.get(t).filter(|r| r.len() == n_levels && !r.is_empty());
                    let row = row.ok_or_else(|| FormatError::Parse(format!("point {}: logits shape", p.id)))?;
                    logits.extend_from_slice(row);
                }
            }
        }
        let mut ts = TrackSet::new(t_n, file.points.iter().map(|p| p.id).collect(), positions, visibility)?;
        if has_levels {
            ts.set_gt_levels(Some(levels))?;
        }
        if has_logits {
            ts.set_logits(Some(Logits { n_levels, values: logits }))?;
        }
        Ok(ts)
    }
}

pub fn trackset_to_json(ts: &TrackSet) -> String {
    serde_json::to_string(&TrackSetFile::from(ts)).expect("track set serializes")
}

pub fn parse_trackset(text: &str) -> Result<TrackSet, FormatError> {
    let file: TrackSetFile = serde_json::from_str(text)?;
    TrackSet::try_from(file)
}

pub fn write_trackset(path: impl AsRef<Path>, ts: &TrackSet) -> Result<(), FormatError> {
    std::fs::write(path, trackset_to_json(ts))?;
    Ok(())
}

pub fn read_trackset(path: impl AsRef<Path>) -> Result<TrackSet, FormatError> {
    parse_trackset(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionFile {
    pub convention: String,
    pub init_pair: [usize; 2],
    pub rmse: f64,
    /// One entry per window frame; `q`/`t` are absent for unregistered frames.
    pub frames: Vec<ReconFrameRecord>,
    pub landmarks: Vec<LandmarkRecord>,
    pub observations: Vec<ObservationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<BaSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconFrameRecord {
    pub idx: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkRecord {
    pub id: u32,
    pub xyz: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationRecord {
    pub frame: usize,
    pub id: u32,
    pub xy: [f64; 2],
    pub inlier: bool,
}

impl From<&Reconstruction> for ReconstructionFile {
    fn from(r: &Reconstruction) -> Self {
        let frames = r
            .poses
            .iter()
            .enumerate()
            .map(|(idx, p)| ReconFrameRecord {
                idx,
                q: p.map(|p| {
                    let q = p.quaternion();
                    [q.w, q.i, q.j, q.k]
                }),
                t: p.map(|p| (*p.translation()).into()),
            })
            .collect();
        Self {
            convention: CONVENTION.into(),
            init_pair: [r.init_pair.0, r.init_pair.1],
            rmse: r.rmse,
            frames,
            landmarks: r.landmarks.iter().map(|(&id, x)| LandmarkRecord { id, xyz: x.coords.into() }).collect(),
            observations: r
                .observations
                .iter()
                .map(|o| ObservationRecord { frame: o.frame, id: o.point_id, xy: o.pixel.into(), inlier: o.inlier })
                .collect(),
            bundle: r.bundle,
        }
    }
}

impl TryFrom<ReconstructionFile> for Reconstruction {
    type Error = FormatError;

    fn try_from(file: ReconstructionFile) -> Result<Self, FormatError> {
        if file.convention != CONVENTION {
            return Err(FormatError::Parse(format!("unsupported convention {:?}", file.convention)));
        }
        let mut poses = Vec::with_capacity(file.frames.len());
        for (i, f) in file.frames.iter().enumerate() {
            if f.idx != i {
                return Err(FormatError::Parse(format!("frame {i} has idx {}", f.idx)));
            }
            poses.push(match (f.q, f.t) {
                (Some(q), Some(t)) => {
                    let q = Quaternion::new(q[0], q[1], q[2], q[3]);
                    if !((q.norm() - 1.0).abs() <= IMPORT_TOLERANCE) {
                        return Err(FormatError::Parse(format!("frame {i}: quaternion norm {}", q.norm())));
                    }
                    Some(Pose::from_quaternion(UnitQuaternion::new_unchecked(q), Vec3::from(t)))
                }
                (None, None) => None,
                _ => return Err(FormatError::Parse(format!("frame {i}: need both \"q\" and \"t\" or neither"))),
            });
        }
        let [a, b] = file.init_pair;
        if !(a < b && b < poses.len()) {
            return Err(FormatError::Parse(format!("invalid init pair ({a}, {b})")));
        }
        Ok(Reconstruction {
            poses,
            landmarks: file.landmarks.iter().map(|l| (l.id, Point3::from(l.xyz))).collect(),
            observations: file
                .observations
                .iter()
                .map(|o| Observation { frame: o.frame, point_id: o.id, pixel: Pixel::from(o.xy), inlier: o.inlier })
                .collect(),
            init_pair: (a, b),
            rmse: file.rmse,
            bundle: file.bundle,
        })
    }
}

pub fn reconstruction_to_json(r: &Reconstruction) -> String {
    serde_json::to_string(&ReconstructionFile::from(r)).expect("reconstruction serializes")
}

pub fn parse_reconstruction(text: &str) -> Result<Reconstruction, FormatError> {
    let file: ReconstructionFile = serde_json::from_str(text)?;
    Reconstruction::try_from(file)
}

pub fn write_reconstruction(path: impl AsRef<Path>, r: &Reconstruction) -> Result<(), FormatError> {
    std::fs::write(path, reconstruction_to_json(r))?;
    Ok(())
}

pub fn read_reconstruction(path: impl AsRef<Path>) -> Result<Reconstruction, FormatError> {
    parse_reconstruction(&std::fs::read_to_string(path)?)
}
