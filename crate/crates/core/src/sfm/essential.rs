//! Two-view geometry: normalized eight-point essential matrix, RANSAC,
//! homography test and cheirality-based pose recovery.

use nalgebra::{Matrix3, Matrix5, Vector5, SVD};

use super::bundle::tangent_basis;
use super::{normalize_2d, null_vector, ransac, score, Correspondence, SfmConfig, SfmError, MIN_ESSENTIAL_POINTS};
use crate::geometry::exp_so3;
use crate::geometry::{
    triangulate_dlt, triangulation_angle_deg, CameraIntrinsics, Mat3, Pose, Vec3, MIN_TRIANGULATION_ANGLE_DEG,
};
use crate::rng;

/// Iteration cap of the manifold refinement inside RANSAC.
const ESSENTIAL_REFINE_ITERS: usize = 10;

/// Result of a robust essential-matrix fit for one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EssentialEstimate {
    /// Unit Frobenius norm, singular values (1, 1, 0)/√2.
    pub essential: Mat3,
    pub inliers: Vec<bool>,
    pub num_inliers: usize,
    pub iterations: usize,
}

fn essential_projection(m: &Mat3) -> Option<Mat3> {
    let svd = SVD::new(*m, true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let (imin, _) = svd.singular_values.argmin();
    let mut d = Matrix3::identity();
    d[(imin, imin)] = 0.0;
    let e = u * d * v_t;
    let norm = e.norm();
    (norm > 1e-300 && e.iter().all(|v| v.is_finite())).then(|| e / norm)
}

/// Normalized eight-point algorithm on normalized image coordinates
/// (`xb^T E xa = 0`), projected onto the essential manifold.
pub fn eight_point(xa: &[Vec3], xb: &[Vec3]) -> Option<Mat3> {
    if xa.len() < MIN_ESSENTIAL_POINTS || xa.len() != xb.len() {
        return None;
    }
    let (na, ta) = normalize_2d(xa);
    let (nb, tb) = normalize_2d(xb);
    let rows: Vec<Vec<f64>> = na
        .iter()
        .zip(&nb)
        .map(|(a, b)| vec![b.x * a.x, b.x * a.y, b.x, b.y * a.x, b.y * a.y, b.y, a.x, a.y, 1.0])
        .collect();
    let f = if rows.len() == MIN_ESSENTIAL_POINTS {
        // Minimal samples: the last column of the full Q factor of Aᵀ spans
        // the null space of A, which is far cheaper than an SVD.
        let mut at = nalgebra::SMatrix::<f64, 9, 9>::zeros();
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                at[(j, i)] = *v;
            }
        }
        let q = at.qr().q();
        Mat3::from_row_slice(q.column(8).as_slice())
    } else {
        let (h, _) = null_vector(&rows, 9)?;
        Mat3::from_row_slice(h.as_slice())
    };
    essential_projection(&(tb.transpose() * f * ta))
}

fn skew(t: &Vec3) -> Mat3 {
    Mat3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// One factorization `E ∝ [t]× R` of an essential matrix.
fn factor_essential(e: &Mat3) -> Option<(Mat3, Vec3)> {
    let svd = SVD::new(*e, true, true);
    let (mut u, mut v_t) = (svd.u?, svd.v_t?);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    Some((u * w * v_t, u.column(2).into_owned()))
}

fn signed_sampson(e: &Mat3, xa: &Vec3, xb: &Vec3) -> f64 {
    let ex = e * xa;
    let etx = e.transpose() * xb;
    let denom = ex.x * ex.x + ex.y * ex.y + etx.x * etx.x + etx.y * etx.y;
    if denom <= 0.0 {
        return 0.0;
    }
    xb.dot(&ex) / denom.sqrt()
}

/// Levenberg–Marquardt refinement of an essential matrix on the manifold
/// `[t]× R` (rotation plus unit translation, five degrees of freedom),
/// minimizing squared Sampson distances, or their Cauchy-robustified form
/// when `robust_scale` is set. The linear eight-point estimate is poorly
/// conditioned for narrow fields of view; this restores a proper geometric
/// fit.
pub fn refine_essential(
    e: &Mat3,
    xa: &[Vec3],
    xb: &[Vec3],
    robust_scale: Option<f64>,
    max_iters: usize,
) -> Option<Mat3> {
    let (mut r, mut t) = factor_essential(e)?;
    let rho = |v: f64| match robust_scale {
        Some(c) => c * c * (v / c).powi(2).ln_1p(),
        None => v * v,
    };
    let weight = |v: f64| match robust_scale {
        Some(c) => 1.0 / (1.0 + (v / c).powi(2)),
        None => 1.0,
    };
    let cost_of = |e: &Mat3| -> f64 { xa.iter().zip(xb).map(|(a, b)| rho(signed_sampson(e, a, b))).sum() };
    let apply = |r: &Mat3, t: &Vec3, d: &Vector5<f64>| {
        let basis = tangent_basis(t);
        let r2 = exp_so3(&Vec3::new(d[0], d[1], d[2])) * r;
        let t2 = (t + basis * nalgebra::Vector2::new(d[3], d[4])).normalize();
        (r2, t2)
    };
    let mut cost = cost_of(&(skew(&t) * r));
    let mut lambda = 1e-3;
    const STEP: f64 = 1e-7;
    for _ in 0..max_iters {
        // Central differences of every residual with respect to the five
        // manifold coordinates, accumulated straight into the normal equations.
        let e0 = skew(&t) * r;
        let mut plus = [Mat3::zeros(); 5];
        let mut minus = [Mat3::zeros(); 5];
        for j in 0..5 {
            let mut d = Vector5::zeros();
            d[j] = STEP;
            let (rp, tp) = apply(&r, &t, &d);
            plus[j] = skew(&tp) * rp;
            d[j] = -STEP;
            let (rm, tm) = apply(&r, &t, &d);
            minus[j] = skew(&tm) * rm;
        }
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for (a, b) in xa.iter().zip(xb) {
            let v = signed_sampson(&e0, a, b);
            let row = Vector5::from_fn(|j, _| {
                (signed_sampson(&plus[j], a, b) - signed_sampson(&minus[j], a, b)) / (2.0 * STEP)
            });
            let w = weight(v);
            jtj += w * row * row.transpose();
            jtr += w * v * row;
        }
        let mut improved = false;
        while lambda < 1e10 {
            let mut m = jtj;
            for i in 0..5 {
                m[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = m.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let (r2, t2) = apply(&r, &t, &step);
            let cost2 = cost_of(&(skew(&t2) * r2));
            if cost2 < cost {
                let rel = (cost - cost2) / cost.max(1e-300);
                r = r2;
                t = t2;
                cost = cost2;
                lambda = (lambda / 3.0).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let e = skew(&t) * r;
    let norm = e.norm();
    (norm > 0.0 && e.iter().all(|v| v.is_finite())).then(|| e / norm)
}

/// First-order geometric distance of a correspondence to the epipolar
/// constraint, in normalized image units.
pub fn sampson_distance(e: &Mat3, xa: &Vec3, xb: &Vec3) -> f64 {
    let r = xb.dot(&(e * xa));
    let ex = e * xa;
    let etx = e.transpose() * xb;
    let denom = ex.x * ex.x + ex.y * ex.y + etx.x * etx.x + etx.y * etx.y;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    r.abs() / denom.sqrt()
}

fn normalized_pairs(corrs: &[Correspondence], k: &CameraIntrinsics) -> (Vec<Vec3>, Vec<Vec3>) {
    corrs.iter().map(|c| (k.normalize(&c.pixel_a), k.normalize(&c.pixel_b))).unzip()
}

/// Robust essential matrix for the correspondences of one frame pair.
pub fn estimate_essential_ransac(
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &SfmConfig,
) -> Result<EssentialEstimate, SfmError> {
    if corrs.len() < MIN_ESSENTIAL_POINTS {
        return Err(SfmError::InsufficientPoints { needed: MIN_ESSENTIAL_POINTS, available: corrs.len() });
    }
    let (xa, xb) = normalized_pairs(corrs, k);
    let tau = cfg.tau_sampson_px / k.mean_focal();
    let mut rng = rng::seeded(cfg.seed, rng::stream::RANSAC);
    let n = corrs.len();
    let fit = |idx: &[usize]| {
        let a: Vec<Vec3> = idx.iter().map(|&i| xa[i]).collect();
        let b: Vec<Vec3> = idx.iter().map(|&i| xb[i]).collect();
        eight_point(&a, &b)
    };
    let refit = |idx: &[usize]| {
        let a: Vec<Vec3> = idx.iter().map(|&i| xa[i]).collect();
        let b: Vec<Vec3> = idx.iter().map(|&i| xb[i]).collect();
        let e = eight_point(&a, &b)?;
        Some(refine_essential(&e, &a, &b, Some(tau), ESSENTIAL_REFINE_ITERS).unwrap_or(e))
    };
    let eval = |e: &Mat3| score(xa.iter().zip(&xb).map(|(a, b)| sampson_distance(e, a, b)), tau);
    let Some((essential, s, iterations)) = ransac(n, MIN_ESSENTIAL_POINTS, cfg, &mut rng, fit, refit, eval) else {
        return Err(SfmError::NoConsensus { inliers: 0, total: n });
    };
    if s.count < cfg.min_inliers || (s.count as f64) < cfg.min_inlier_ratio * n as f64 {
        return Err(SfmError::NoConsensus { inliers: s.count, total: n });
    }
    Ok(EssentialEstimate { essential, inliers: s.inliers, num_inliers: s.count, iterations })
}

fn homography_dlt(xa: &[Vec3], xb: &[Vec3]) -> Option<Mat3> {
    let (na, ta) = normalize_2d(xa);
    let (nb, tb) = normalize_2d(xb);
    let mut rows = Vec::with_capacity(2 * na.len());
    for (a, b) in na.iter().zip(&nb) {
        rows.push(vec![0.0, 0.0, 0.0, -a.x, -a.y, -1.0, b.y * a.x, b.y * a.y, b.y]);
        rows.push(vec![a.x, a.y, 1.0, 0.0, 0.0, 0.0, -b.x * a.x, -b.x * a.y, -b.x]);
    }
    let (h, _) = null_vector(&rows, 9)?;
    let hn = Mat3::from_row_slice(h.as_slice());
    let h = tb.try_inverse()? * hn * ta;
    h.iter().all(|v| v.is_finite()).then_some(h)
}

fn transfer_error(h: &Mat3, xa: &Vec3, xb: &Vec3) -> f64 {
    let p = h * xa;
    if p.z.abs() < 1e-15 {
        return f64::INFINITY;
    }
    ((p.x / p.z - xb.x).powi(2) + (p.y / p.z - xb.y).powi(2)).sqrt()
}

/// Transfer error is a 2-DoF residual while the Sampson distance is 1-DoF;
/// scaling the threshold by sqrt(chi2_2(0.95) / chi2_1(0.95)) makes both
/// tests accept the same fraction of clean correspondences.
const HOMOGRAPHY_THRESHOLD_SCALE: f64 = 1.2489;

/// Threshold multiplier for the widened consensus set used in local refits.
const HOMOGRAPHY_LO_WIDEN: f64 = 3.0;

/// Robust homography between normalized coordinates; returns the inlier mask
/// for a transfer-error threshold equivalent to `cfg.tau_sampson_px`.
pub fn estimate_homography_ransac(
    xa: &[Vec3],
    xb: &[Vec3],
    k: &CameraIntrinsics,
    cfg: &SfmConfig,
) -> Option<(Mat3, Vec<bool>)> {
    if xa.len() < 4 || xa.len() != xb.len() {
        return None;
    }
    let tau = HOMOGRAPHY_THRESHOLD_SCALE * cfg.tau_sampson_px / k.mean_focal();
    let mut rng = rng::seeded(cfg.seed, rng::stream::RANSAC);
    let fit = |idx: &[usize]| {
        let a: Vec<Vec3> = idx.iter().map(|&i| xa[i]).collect();
        let b: Vec<Vec3> = idx.iter().map(|&i| xb[i]).collect();
        homography_dlt(&a, &b)
    };
    // Refit on the consensus set widened to a multiple of the threshold: a
    // distorted hypothesis keeps only a strip of inliers, which alone leaves
    // the perspective terms unconstrained.
    let refit = |idx: &[usize]| {
        let h = fit(idx)?;
        let wide: Vec<usize> =
            (0..xa.len()).filter(|&i| transfer_error(&h, &xa[i], &xb[i]) < HOMOGRAPHY_LO_WIDEN * tau).collect();
        fit(&wide)
    };
    let eval = |h: &Mat3| score(xa.iter().zip(xb).map(|(a, b)| transfer_error(h, a, b)), tau);
    let (h, s, _) = ransac(xa.len(), 4, cfg, &mut rng, fit, refit, eval)?;
    Some((h, s.inliers))
}

/// The four (R, t) decompositions of an essential matrix.
fn decompose(e: &Mat3) -> Option<[(Mat3, Vec3); 4]> {
    let svd = SVD::new(*e, true, true);
    let (u0, vt0) = (svd.u?, svd.v_t?);
    let (imin, _) = svd.singular_values.argmin();
    let order: Vec<usize> = (0..3).filter(|&i| i != imin).chain([imin]).collect();
    let mut u = Mat3::from_columns(&[u0.column(order[0]), u0.column(order[1]), u0.column(order[2])]);
    let v0 = vt0.transpose();
    let mut v = Mat3::from_columns(&[v0.column(order[0]), v0.column(order[1]), v0.column(order[2])]);
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v.determinant() < 0.0 {
        v.column_mut(2).neg_mut();
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v.transpose();
    let r2 = u * w.transpose() * v.transpose();
    let t: Vec3 = u.column(2).into();
    Some([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Pick the decomposition of `e` that puts the most correspondences in front
/// of both cameras with a usable triangulation angle. The returned pose maps
/// frame-a camera coordinates to frame-b camera coordinates, with `‖t‖ = 1`.
pub fn recover_relative_pose(e: &Mat3, corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<Pose, SfmError> {
    if corrs.is_empty() {
        return Err(SfmError::InsufficientPoints { needed: 1, available: 0 });
    }
    let (xa, xb) = normalized_pairs(corrs, k);
    recover_relative_pose_normalized(e, &xa, &xb)
}

pub(crate) fn recover_relative_pose_normalized(e: &Mat3, xa: &[Vec3], xb: &[Vec3]) -> Result<Pose, SfmError> {
    let candidates = decompose(e).ok_or_else(|| SfmError::DegenerateGeometry("essential SVD failed".into()))?;
    let origin = Pose::identity();
    let mut best: Option<(usize, Pose)> = None;
    for (r, t) in candidates {
        let pose = Pose::from_rotation_matrix(&r, t.normalize());
        let cb = pose.center();
        let support = xa
            .iter()
            .zip(xb)
            .filter(|(a, b)| {
                triangulate_dlt(a, b, &origin, &pose).is_some_and(|x| {
                    x.z > 0.0
                        && pose.transform(&x).z > 0.0
                        && triangulation_angle_deg(&x, &Vec3::zeros(), &cb) >= MIN_TRIANGULATION_ANGLE_DEG
                })
            })
            .count();
        if best.as_ref().is_none_or(|(s, _)| support > *s) {
            best = Some((support, pose));
        }
    }
    let (support, pose) = best.expect("four candidates");
    let fraction = support as f64 / xa.len() as f64;
    if fraction <= 0.5 {
        return Err(SfmError::CheiralityAmbiguous { support: fraction });
    }
    Ok(pose)
}
