//! Camera registration from 2D-3D matches: linear DLT, RANSAC and
//! Levenberg–Marquardt refinement of the reprojection error.

use nalgebra::{Matrix3x4, Matrix4, Matrix6, Vector6, SVD};

use super::{normalize_2d, null_vector, ransac, score, SfmConfig, SfmError, MIN_PNP_POINTS};
use crate::geometry::{exp_so3, nearest_rotation, CameraIntrinsics, Mat3, Pixel, Point3, Pose, Vec3};
use crate::rng;

/// Relative size of the second-smallest DLT singular value below which the
/// point configuration does not determine the camera.
const RANK_TOLERANCE: f64 = 1e-8;

/// LM iterations applied to every RANSAC hypothesis.
const HYPOTHESIS_REFINE_ITERS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PnpEstimate {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub num_inliers: usize,
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Linear camera resection from world points and normalized image points.
///
/// Fails with `NoConsensus` when the configuration is rank deficient (for
/// example collinear or coplanar points).
pub fn pnp_dlt(points: &[Vec3], xs: &[Vec3]) -> Result<Pose, SfmError> {
    let n = points.len();
    if n < MIN_PNP_POINTS || xs.len() != n {
        return Err(SfmError::InsufficientPoints { needed: MIN_PNP_POINTS, available: n.min(xs.len()) });
    }
    let centroid = points.iter().sum::<Vec3>() / n as f64;
    let mean = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n as f64;
    if mean <= 1e-15 {
        return Err(SfmError::NoConsensus { inliers: 0, total: n });
    }
    let s = 3f64.sqrt() / mean;
    let mut t3 = Matrix4::identity() * s;
    t3[(3, 3)] = 1.0;
    t3.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-s * centroid));
    let (xn, t2) = normalize_2d(xs);

    let mut rows = Vec::with_capacity(2 * n);
    for (p, x) in points.iter().zip(&xn) {
        let q = s * (p - centroid);
        let h = [q.x, q.y, q.z, 1.0];
        let mut r1 = vec![0.0; 12];
        let mut r2 = vec![0.0; 12];
        for j in 0..4 {
            r1[j] = h[j];
            r1[8 + j] = -x.x * h[j];
            r2[4 + j] = h[j];
            r2[8 + j] = -x.y * h[j];
        }
        rows.push(r1);
        rows.push(r2);
    }
    let (v, sv) = null_vector(&rows, 12).ok_or(SfmError::NoConsensus { inliers: 0, total: n })?;
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if !(sorted[1] > RANK_TOLERANCE * sorted[11]) {
        return Err(SfmError::NoConsensus { inliers: 0, total: n });
    }
    let p_hat = Matrix3x4::from_row_slice(v.as_slice());
    let t2_inv = t2.try_inverse().ok_or(SfmError::NoConsensus { inliers: 0, total: n })?;
    let mut p = t2_inv * p_hat * t3;
    let m: Mat3 = p.fixed_view::<3, 3>(0, 0).into();
    if m.determinant() < 0.0 {
        p = -p;
    }
    let m: Mat3 = p.fixed_view::<3, 3>(0, 0).into();
    let scale = SVD::new(m, false, false).singular_values.mean();
    if !(scale > 1e-300) {
        return Err(SfmError::NoConsensus { inliers: 0, total: n });
    }
    let r = nearest_rotation(&m);
    let t: Vec3 = p.column(3) / scale;
    Ok(Pose::from_rotation_matrix(&r, t))
}

fn reprojection_errors<'a>(
    pose: &'a Pose,
    points: &'a [Point3],
    pixels: &'a [Pixel],
    k: &'a CameraIntrinsics,
) -> impl Iterator<Item = f64> + 'a {
    points.iter().zip(pixels).map(move |(x, px)| match k.project_camera(&pose.transform(&x.coords)) {
        Ok((p, _)) => (p - px).norm(),
        Err(_) => f64::INFINITY,
    })
}

/// Levenberg–Marquardt refinement of one camera on squared pixel residuals,
/// with left-multiplied axis-angle rotation updates. Only cost-decreasing
/// steps are taken.
pub fn refine_pose(pose: &Pose, points: &[Point3], pixels: &[Pixel], k: &CameraIntrinsics, max_iters: usize) -> Pose {
    let cost = |p: &Pose| -> f64 { reprojection_errors(p, points, pixels, k).map(|e| e * e).sum() };
    let mut current = *pose;
    let mut c = cost(&current);
    let mut lambda = 1e-3;
    for _ in 0..max_iters {
        if !c.is_finite() || c <= 1e-30 {
            break;
        }
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (x, px) in points.iter().zip(pixels) {
            let rx = current.rotation() * x.coords;
            let y = rx + current.translation();
            if y.z <= 0.0 {
                continue;
            }
            let (proj, _) = k.project_camera(&y).expect("positive depth");
            let r = proj - px;
            let jp = nalgebra::Matrix2x3::new(
                k.fx / y.z,
                0.0,
                -k.fx * y.x / (y.z * y.z),
                0.0,
                k.fy / y.z,
                -k.fy * y.y / (y.z * y.z),
            );
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew(&rx)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut accepted = false;
        while lambda < 1e10 {
            let mut a = h;
            for i in 0..6 {
                a[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|ch| ch.solve(&-g)) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vec3::new(delta[0], delta[1], delta[2]);
            let dt = Vec3::new(delta[3], delta[4], delta[5]);
            let cand = Pose::from_rotation_matrix(&(exp_so3(&w) * current.rotation()), current.translation() + dt);
            let cc = cost(&cand);
            if cc < c {
                let rel = (c - cc) / c;
                current = cand;
                c = cc;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < 1e-12 {
                    return current;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    current
}

/// Robust registration of a new camera against known landmarks.
pub fn register_view_pnp(
    points: &[Point3],
    pixels: &[Pixel],
    k: &CameraIntrinsics,
    cfg: &SfmConfig,
) -> Result<PnpEstimate, SfmError> {
    let n = points.len();
    if n < MIN_PNP_POINTS || pixels.len() != n {
        return Err(SfmError::InsufficientPoints { needed: MIN_PNP_POINTS, available: n.min(pixels.len()) });
    }
    let world: Vec<Vec3> = points.iter().map(|p| p.coords).collect();
    let xs: Vec<Vec3> = pixels.iter().map(|p| k.normalize(p)).collect();
    let mut rng = rng::seeded(cfg.seed, rng::stream::RANSAC);
    // The linear solution carries projective distortion for small or nearly
    // flat point patches; a few LM steps on the same subset make it rigid.
    let fit = |idx: &[usize]| {
        let w: Vec<Vec3> = idx.iter().map(|&i| world[i]).collect();
        let x: Vec<Vec3> = idx.iter().map(|&i| xs[i]).collect();
        let pose = pnp_dlt(&w, &x).ok()?;
        let pts: Vec<Point3> = idx.iter().map(|&i| points[i]).collect();
        let px: Vec<Pixel> = idx.iter().map(|&i| pixels[i]).collect();
        Some(refine_pose(&pose, &pts, &px, k, HYPOTHESIS_REFINE_ITERS))
    };
    let eval = |p: &Pose| score(reprojection_errors(p, points, pixels, k), cfg.tau_pnp_px);
    let Some((pose, s, _)) = ransac(n, MIN_PNP_POINTS, cfg, &mut rng, fit, fit, eval) else {
        return Err(SfmError::NoConsensus { inliers: 0, total: n });
    };
    let mut pose = pose;
    let mut s = s;
    for _ in 0..3 {
        let (ip, ix): (Vec<Point3>, Vec<Pixel>) =
            points.iter().zip(pixels).zip(&s.inliers).filter(|(_, &b)| b).map(|((p, x), _)| (*p, *x)).unzip();
        let refined = refine_pose(&pose, &ip, &ix, k, 50);
        let rs = eval(&refined);
        if rs.count < s.count {
            break;
        }
        let changed = rs.inliers != s.inliers;
        pose = refined;
        s = rs;
        if !changed {
            break;
        }
    }
    if s.count < MIN_PNP_POINTS || (s.count as f64) < cfg.min_inlier_ratio * n as f64 {
        return Err(SfmError::NoConsensus { inliers: s.count, total: n });
    }
    Ok(PnpEstimate { pose, inliers: s.inliers, num_inliers: s.count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rotation_matrix_angle_deg};
    use crate::sfm::fixtures::{cloud, two_view_poses};

    fn observe(points: &[Point3], pose: &Pose, k: &CameraIntrinsics) -> Vec<Pixel> {
        points.iter().map(|p| project(p, pose, k).unwrap().pixel).collect()
    }

    fn errors(a: &Pose, b: &Pose) -> (f64, f64) {
        (
            rotation_matrix_angle_deg(&(a.rotation().transpose() * b.rotation())),
            (a.translation() - b.translation()).norm(),
        )
    }

    #[test]
    fn noiseless_registration_is_exact() {
        let k = CameraIntrinsics::default();
        let (_, truth) = two_view_poses();
        let pts = cloud(50, 11);
        let est = register_view_pnp(&pts, &observe(&pts, &truth, &k), &k, &SfmConfig::default()).unwrap();
        let (r, t) = errors(&est.pose, &truth);
        assert!(r < 1e-6 && t < 1e-8, "rot {r} deg, trans {t} m");
        assert_eq!(est.num_inliers, 50);
    }

    #[test]
    fn minimal_six_points() {
        let k = CameraIntrinsics::default();
        let (truth, _) = two_view_poses();
        let pts = cloud(6, 12);
        let est = register_view_pnp(&pts, &observe(&pts, &truth, &k), &k, &SfmConfig::default()).unwrap();
        let (r, t) = errors(&est.pose, &truth);
        assert!(r < 1e-6 && t < 1e-8, "rot {r} deg, trans {t} m");
    }

    #[test]
    fn collinear_points_have_no_consensus() {
        let k = CameraIntrinsics::default();
        let (truth, _) = two_view_poses();
        let pts: Vec<Point3> = (0..20).map(|i| Point3::new(-0.4 + 0.04 * i as f64, 0.02 * i as f64, 0.1)).collect();
        let res = register_view_pnp(&pts, &observe(&pts, &truth, &k), &k, &SfmConfig::default());
        assert!(matches!(res, Err(SfmError::NoConsensus { .. })), "{res:?}");
    }

    #[test]
    fn outliers_are_rejected() {
        let k = CameraIntrinsics::default();
        let (_, truth) = two_view_poses();
        let pts = cloud(60, 13);
        let mut px = observe(&pts, &truth, &k);
        for p in px.iter_mut().step_by(5) {
            *p += Pixel::new(25.0, -18.0);
        }
        let est = register_view_pnp(&pts, &px, &k, &SfmConfig::default()).unwrap();
        assert_eq!(est.num_inliers, 48);
        let (r, t) = errors(&est.pose, &truth);
        assert!(r < 1e-6 && t < 1e-8);
    }

    #[test]
    fn refinement_recovers_perturbed_pose() {
        let k = CameraIntrinsics::default();
        let (truth, _) = two_view_poses();
        let pts = cloud(40, 14);
        let px = observe(&pts, &truth, &k);
        let start = Pose::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 2f64.to_radians(), Vec3::new(0.02, -0.01, 0.03))
            .compose(&truth);
        let refined = refine_pose(&start, &pts, &px, &k, 100);
        let (r, t) = errors(&refined, &truth);
        assert!(r < 1e-8 && t < 1e-10, "rot {r}, trans {t}");
    }
}
