//! Rigid and similarity transforms, pinhole projection, two-view
//! triangulation and closed-form 7-DoF point-set alignment.
//!
//! Poses are world-to-camera: `X_cam = R * X_world + t`. The object frame is
//! the world frame, so the pose of a tracked object is the inverse of the
//! camera pose. Trajectory positions used for alignment and scoring are camera
//! centers `c = -R^T t`, never the raw translation vectors.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Point3 = nalgebra::Point3<f64>;
pub type Pixel = Vector2<f64>;

/// Depth below which a point is considered to be on or behind the image plane.
pub const MIN_DEPTH: f64 = 1e-9;
/// Minimum angle between viewing rays accepted by [`triangulate_two_view`].
pub const MIN_TRIANGULATION_ANGLE_DEG: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point lies behind the camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },
    #[error("viewing rays are near-parallel ({angle_deg:.4} deg)")]
    DegenerateRay { angle_deg: f64 },
    #[error("point configuration is degenerate: {0}")]
    DegenerateConfiguration(String),
    #[error("matrix is not a proper rotation (orthonormality error {ortho:.3e}, det {det:.6})")]
    InvalidRotation { ortho: f64, det: f64 },
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Rigid world-to-camera transform.
///
/// The unit quaternion (w >= 0) is the stored representation; the rotation
/// matrix is derived from it once at construction. This keeps the on-disk
/// quaternion and the in-memory pose in exact correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    quaternion: UnitQuaternion<f64>,
    rotation: Mat3,
    translation: Vec3,
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Frobenius norm of `R^T R - I`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

/// Projects an arbitrary 3x3 matrix onto SO(3) with an SVD.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut fix = Mat3::identity();
        fix[(2, 2)] = -1.0;
        r = u * fix * v_t;
    }
    r
}

/// Rotation matrix for a rotation vector (axis times angle in radians).
pub fn exp_so3(omega: &Vec3) -> Mat3 {
    Rotation3::new(*omega).into_inner()
}

impl Pose {
    pub fn identity() -> Self {
        Self::from_quaternion(UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vec3) -> Self {
        let quaternion = canonical(q);
        Self { quaternion, rotation: quaternion.to_rotation_matrix().into_inner(), translation }
    }

    /// Builds a pose from a matrix already known to be a rotation.
    pub fn from_rotation_matrix(r: &Mat3, translation: Vec3) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
        Self::from_quaternion(q, translation)
    }

    /// Like [`Pose::from_rotation_matrix`] but rejects matrices that are not
    /// rotations within `tol`.
    pub fn try_from_matrix(r: &Mat3, translation: Vec3, tol: f64) -> Result<Self, GeometryError> {
        let ortho = orthonormality_error(r);
        let det = r.determinant();
        if !ortho.is_finite() || ortho > tol || (det - 1.0).abs() > tol {
            return Err(GeometryError::InvalidRotation { ortho, det });
        }
        Ok(Self::from_rotation_matrix(r, translation))
    }

    pub fn from_axis_angle(axis: &Vec3, angle_rad: f64, translation: Vec3) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self::from_quaternion(UnitQuaternion::from_axis_angle(&axis, angle_rad), translation)
    }

    /// Camera at `center` whose optical axis passes through `target`, with
    /// image y pointing along `-up` (OpenCV convention: x right, y down, z forward).
    pub fn look_at(center: &Vec3, target: &Vec3, up: &Vec3) -> Self {
        let forward = (target - center).normalize();
        let mut right = forward.cross(up);
        if right.norm() < 1e-9 {
            // Looking along the up vector; pick any perpendicular.
            let alt = if forward.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            right = forward.cross(&alt);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let pose = Self::from_rotation_matrix(&r, Vec3::zeros());
        let t = -(pose.rotation * center);
        Self { translation: t, ..pose }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.quaternion
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn with_translation(&self, translation: Vec3) -> Self {
        Self { translation, ..*self }
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.transform(&p.coords))
    }

    pub fn inverse(&self) -> Self {
        let inv = Self::from_quaternion(self.quaternion.inverse(), Vec3::zeros());
        let translation = -(inv.rotation * self.translation);
        Self { translation, ..inv }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::from_quaternion(self.quaternion * other.quaternion, self.rotation * other.translation + self.translation)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        orthonormality_error(&self.rotation) <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Scale, rotation and translation: `x -> s * R * x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_t = self.rotation.transpose();
        Self { scale: 1.0 / self.scale, rotation: r_t, translation: -(r_t * self.translation) / self.scale }
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { fx: 500.0, fy: 500.0, cx: 256.0, cy: 256.0, width: 512, height: 512 }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Normalized image coordinates `K^-1 [u v 1]^T` (third component is 1).
    pub fn normalize(&self, px: &Pixel) -> Vec3 {
        Vec3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    pub fn denormalize(&self, xy: &Vector2<f64>) -> Pixel {
        Pixel::new(self.fx * xy.x + self.cx, self.fy * xy.y + self.cy)
    }

    /// Pixel and depth of a camera-frame point.
    pub fn project_camera(&self, p: &Vec3) -> Result<(Pixel, f64), GeometryError> {
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { depth: p.z });
        }
        Ok((Pixel::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy), p.z))
    }

    /// Camera-frame point at `depth` along the ray through `px`.
    pub fn unproject(&self, px: &Pixel, depth: f64) -> Vec3 {
        self.normalize(px) * depth
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Pixel,
    pub depth: f64,
}

/// Transform carrying frame-`a` camera coordinates to frame-`b` camera
/// coordinates, so that `relative_pose(a, b) ∘ a == b`.
pub fn relative_pose(a: &Pose, b: &Pose) -> Pose {
    b.compose(&a.inverse())
}

/// Geodesic rotation angle of a pose in degrees, in `[0, 180]`.
pub fn rotation_angle_deg(p: &Pose) -> f64 {
    rotation_matrix_angle_deg(p.rotation())
}

/// Geodesic angle of a rotation matrix in degrees. Uses `atan2(sin, cos)` so
/// that tiny angles keep full relative precision.
pub fn rotation_matrix_angle_deg(r: &Mat3) -> f64 {
    let c = (r.trace() - 1.0) * 0.5;
    let s = 0.5 * Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    s.atan2(c).to_degrees()
}

pub fn project(point: &Point3, pose: &Pose, k: &CameraIntrinsics) -> Result<Projection, GeometryError> {
    let pc = pose.transform(&point.coords);
    let (pixel, depth) = k.project_camera(&pc)?;
    Ok(Projection { pixel, depth })
}

/// World point seen at `pixel` with camera-frame depth `depth`.
pub fn back_project(pixel: &Pixel, depth: f64, pose: &Pose, k: &CameraIntrinsics) -> Point3 {
    let pc = k.unproject(pixel, depth);
    Point3::from(pose.rotation().transpose() * (pc - pose.translation()))
}

/// Angle in degrees between the viewing rays of two cameras towards `x`.
pub fn triangulation_angle_deg(x: &Vec3, center_a: &Vec3, center_b: &Vec3) -> f64 {
    let da = (x - center_a).normalize();
    let db = (x - center_b).normalize();
    da.dot(&db).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Linear (DLT) two-view triangulation.
///
/// Fails with `DegenerateRay` for near-parallel rays or a vanishing baseline,
/// and with `BehindCamera` when the solution violates cheirality in either view.
pub fn triangulate_two_view(
    obs_a: &Pixel,
    obs_b: &Pixel,
    pose_a: &Pose,
    pose_b: &Pose,
    k: &CameraIntrinsics,
) -> Result<Point3, GeometryError> {
    let baseline = (pose_a.center() - pose_b.center()).norm();
    let ra = pose_a.rotation().transpose() * k.normalize(obs_a);
    let rb = pose_b.rotation().transpose() * k.normalize(obs_b);
    let ray_angle = ra.normalize().dot(&rb.normalize()).clamp(-1.0, 1.0).acos().to_degrees();
    if baseline <= 1e-9 || ray_angle < MIN_TRIANGULATION_ANGLE_DEG {
        return Err(GeometryError::DegenerateRay { angle_deg: ray_angle });
    }
    triangulate_normalized(&k.normalize(obs_a), &k.normalize(obs_b), pose_a, pose_b)
}

/// Raw homogeneous DLT solution for two views in normalized coordinates,
/// without any cheirality check. `None` for points at infinity.
pub fn triangulate_dlt(xa: &Vec3, xb: &Vec3, pose_a: &Pose, pose_b: &Pose) -> Option<Vec3> {
    let mut a = Matrix4::<f64>::zeros();
    for (row, (x, pose)) in [(xa, pose_a), (xb, pose_b)].into_iter().enumerate() {
        let r = pose.rotation();
        let t = pose.translation();
        for c in 0..3 {
            a[(2 * row, c)] = x.x * r[(2, c)] - r[(0, c)];
            a[(2 * row + 1, c)] = x.y * r[(2, c)] - r[(1, c)];
        }
        a[(2 * row, 3)] = x.x * t.z - t.x;
        a[(2 * row + 1, 3)] = x.y * t.z - t.y;
    }
    let svd = SVD::new(a, false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd.singular_values.argmin();
    let h = v_t.row(min_idx);
    let x = Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    (h[3].abs() >= 1e-14 && x.iter().all(|v| v.is_finite())).then_some(x)
}

/// DLT triangulation from normalized image coordinates (no angle gate).
pub fn triangulate_normalized(xa: &Vec3, xb: &Vec3, pose_a: &Pose, pose_b: &Pose) -> Result<Point3, GeometryError> {
    let x = triangulate_dlt(xa, xb, pose_a, pose_b).ok_or(GeometryError::DegenerateRay { angle_deg: 0.0 })?;
    for pose in [pose_a, pose_b] {
        let depth = pose.transform(&x).z;
        if depth <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { depth });
        }
    }
    Ok(Point3::from(x))
}

/// Closed-form least-squares similarity (Umeyama) mapping `source` onto `target`.
pub fn umeyama_align(source: &[Vec3], target: &[Vec3]) -> Result<SimilarityTransform, GeometryError> {
    let n = source.len();
    if n != target.len() {
        return Err(GeometryError::InvalidInput(format!("point sets differ in length ({} vs {})", n, target.len())));
    }
    if n < 3 {
        return Err(GeometryError::DegenerateConfiguration(format!("need at least 3 points, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = source.iter().sum::<Vec3>() * inv_n;
    let mu_t = target.iter().sum::<Vec3>() * inv_n;

    let mut cross = Mat3::zeros();
    let mut cov_s = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        let dt = t - mu_t;
        cross += dt * ds.transpose();
        cov_s += ds * ds.transpose();
        var_s += ds.norm_squared();
    }
    cross *= inv_n;
    cov_s *= inv_n;
    var_s *= inv_n;

    let sv = cov_s.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(var_s > 0.0) || sv[1] <= 1e-12 * sv[0].max(f64::MIN_POSITIVE) {
        return Err(GeometryError::DegenerateConfiguration("source points are coincident or collinear".into()));
    }

    let svd = SVD::new(cross, true, true);
    let u = svd.u.ok_or_else(|| GeometryError::DegenerateConfiguration("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| GeometryError::DegenerateConfiguration("svd failed".into()))?;
    let d = svd.singular_values;
    let mut sign = Vec3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        // Flip the axis of the smallest singular value.
        let (min_idx, _) = d.argmin();
        sign[min_idx] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&sign) * v_t;
    let scale = d.component_mul(&sign).sum() / var_s;
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(SimilarityTransform { scale, rotation, translation })
}
