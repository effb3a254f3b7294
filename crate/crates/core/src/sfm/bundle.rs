//! Sparse bundle adjustment: Levenberg–Marquardt with a Schur complement on
//! the landmark blocks.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, OMatrix, U2, U6};
use serde::{Deserialize, Serialize};

use super::{Reconstruction, SfmError};
use crate::geometry::{exp_so3, CameraIntrinsics, Mat3, Point3, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleConfig {
    pub max_iters: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    pub lambda_init: f64,
    pub lambda_max: f64,
    /// Huber threshold on the residual norm (px); `None` means plain least squares.
    pub huber_delta_px: Option<f64>,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self { max_iters: 100, rel_tol: 1e-10, lambda_init: 1e-3, lambda_max: 1e10, huber_delta_px: None }
    }
}

impl BundleConfig {
    pub fn validate(&self) -> Result<(), SfmError> {
        if self.max_iters == 0
            || !(self.rel_tol >= 0.0)
            || !(self.lambda_init > 0.0 && self.lambda_max > self.lambda_init)
        {
            return Err(SfmError::InvalidInput("bundle adjustment settings out of range".into()));
        }
        if self.huber_delta_px.is_some_and(|d| !(d > 0.0)) {
            return Err(SfmError::InvalidInput("huber threshold must be positive".into()));
        }
        Ok(())
    }
}

/// What one bundle adjustment call did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    /// No step could lower the cost; the geometry was left unchanged.
    pub diverged: bool,
}

fn robust(sq: f64, huber: Option<f64>) -> f64 {
    match huber {
        Some(d) if sq > d * d => 2.0 * d * sq.sqrt() - d * d,
        _ => sq,
    }
}

/// Total (robustified) squared reprojection error over inlier observations.
/// Infinite if any inlier lands behind its camera.
pub fn reprojection_cost(recon: &Reconstruction, k: &CameraIntrinsics, huber_delta_px: Option<f64>) -> f64 {
    let mut cost = 0.0;
    for o in recon.observations.iter().filter(|o| o.inlier) {
        let (Some(pose), Some(x)) = (recon.poses.get(o.frame).copied().flatten(), recon.landmarks.get(&o.point_id))
        else {
            continue;
        };
        match k.project_camera(&pose.transform(&x.coords)) {
            Ok((px, _)) => cost += robust((px - o.pixel).norm_squared(), huber_delta_px),
            Err(_) => return f64::INFINITY,
        }
    }
    cost
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Orthonormal basis of the plane perpendicular to unit `t`.
pub(super) fn tangent_basis(t: &Vec3) -> nalgebra::Matrix3x2<f64> {
    let a = if t.x.abs() < 0.6 {
        Vec3::x()
    } else if t.y.abs() < 0.6 {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let b1 = t.cross(&a).normalize();
    let b2 = t.cross(&b1);
    nalgebra::Matrix3x2::from_columns(&[b1, b2])
}

struct Residual {
    cam: Option<usize>,
    point: usize,
    frame: usize,
    pixel: nalgebra::Vector2<f64>,
}

struct Problem {
    /// (frame, parameter offset, parameter count) for each free camera.
    cams: Vec<(usize, usize, usize)>,
    point_ids: Vec<u32>,
    residuals: Vec<Residual>,
    by_point: Vec<Vec<usize>>,
    cam_dim: usize,
    scale_frame: usize,
}

impl Problem {
    fn new(recon: &Reconstruction, gauge: usize) -> Self {
        let scale_frame = recon.scale_frame();
        let mut cams = Vec::new();
        let mut frame_to_cam = BTreeMap::new();
        let mut offset = 0;
        for (j, p) in recon.poses.iter().enumerate() {
            if p.is_some() && j != gauge {
                let dim = if j == scale_frame { 5 } else { 6 };
                frame_to_cam.insert(j, cams.len());
                cams.push((j, offset, dim));
                offset += dim;
            }
        }
        let mut point_index = BTreeMap::new();
        let mut point_ids = Vec::new();
        let mut residuals = Vec::new();
        for o in recon.observations.iter().filter(|o| o.inlier) {
            if recon.poses.get(o.frame).copied().flatten().is_none() || !recon.landmarks.contains_key(&o.point_id) {
                continue;
            }
            let point = *point_index.entry(o.point_id).or_insert_with(|| {
                point_ids.push(o.point_id);
                point_ids.len() - 1
            });
            residuals.push(Residual {
                cam: frame_to_cam.get(&o.frame).copied(),
                point,
                frame: o.frame,
                pixel: o.pixel,
            });
        }
        let mut by_point = vec![Vec::new(); point_ids.len()];
        for (i, r) in residuals.iter().enumerate() {
            by_point[r.point].push(i);
        }
        Self { cams, point_ids, residuals, by_point, cam_dim: offset, scale_frame }
    }
}

/// Jointly refine all registered poses and landmarks on inlier observations.
///
/// The gauge frame stays at the identity and the scale frame's translation
/// stays on the unit sphere. Only cost-decreasing steps are accepted, so the
/// final cost never exceeds the initial one.
pub fn bundle_adjust(
    recon: &Reconstruction,
    k: &CameraIntrinsics,
    cfg: &BundleConfig,
) -> Result<Reconstruction, SfmError> {
    cfg.validate()?;
    let mut out = recon.clone();
    out.regauge()?;
    let gauge = out.gauge_frame().expect("regauge checked registration");
    let problem = Problem::new(&out, gauge);
    let huber = cfg.huber_delta_px;

    let initial_cost = reprojection_cost(&out, k, huber);
    if !initial_cost.is_finite() {
        return Err(SfmError::InvalidInput("initial reconstruction has landmarks behind cameras".into()));
    }
    let mut cost = initial_cost;
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;
    let mut accepted_steps = 0;
    let nc = problem.cam_dim;

    'outer: while iterations < cfg.max_iters && cost > 0.0 {
        iterations += 1;
        let basis = tangent_basis(out.poses[problem.scale_frame].expect("scale frame").translation());
        // Normal equations in block form.
        let mut hcc = DMatrix::<f64>::zeros(nc, nc);
        let mut gc = DVector::<f64>::zeros(nc);
        let mut vpp = vec![Matrix3::<f64>::zeros(); problem.point_ids.len()];
        let mut gp = vec![Vec3::zeros(); problem.point_ids.len()];
        let mut wcp: Vec<Option<OMatrix<f64, U6, nalgebra::U3>>> = Vec::with_capacity(problem.residuals.len());
        for res in &problem.residuals {
            let pose = out.poses[res.frame].expect("registered");
            let x = out.landmarks[&problem.point_ids[res.point]].coords;
            let rx = pose.rotation() * x;
            let y = rx + pose.translation();
            let (px, _) = k.project_camera(&y).map_err(SfmError::from)?;
            let r = px - res.pixel;
            let w = match huber {
                Some(d) if r.norm() > d => d / r.norm(),
                _ => 1.0,
            };
            let jproj =
                Matrix2x3::new(k.fx / y.z, 0.0, -k.fx * y.x / (y.z * y.z), 0.0, k.fy / y.z, -k.fy * y.y / (y.z * y.z));
            let jp = jproj * pose.rotation();
            vpp[res.point] += jp.transpose() * jp * w;
            gp[res.point] += jp.transpose() * r * w;
            let Some(ci) = res.cam else {
                wcp.push(None);
                continue;
            };
            let (frame, off, dim) = problem.cams[ci];
            let mut jc = OMatrix::<f64, U2, U6>::zeros();
            jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jproj * -skew(&rx)));
            if frame == problem.scale_frame {
                jc.fixed_view_mut::<2, 2>(0, 3).copy_from(&(jproj * basis));
            } else {
                jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&jproj);
            }
            let jc_t = jc.transpose();
            let hblock = jc_t * jc * w;
            let gblock = jc_t * r * w;
            for a in 0..dim {
                gc[off + a] += gblock[a];
                for b in 0..dim {
                    hcc[(off + a, off + b)] += hblock[(a, b)];
                }
            }
            wcp.push(Some(jc_t * jp * w));
        }

        loop {
            if lambda > cfg.lambda_max {
                break 'outer;
            }
            let mut s = hcc.clone();
            for i in 0..nc {
                s[(i, i)] += lambda * hcc[(i, i)].max(1e-12);
            }
            let mut rhs = -&gc;
            let mut vinv = Vec::with_capacity(vpp.len());
            for (p, v) in vpp.iter().enumerate() {
                let mut vd = *v;
                for i in 0..3 {
                    vd[(i, i)] += lambda * v[(i, i)].max(1e-12);
                }
                let Some(inv) = vd.try_inverse() else {
                    lambda *= 10.0;
                    continue;
                };
                let obs = &problem.by_point[p];
                for &i in obs {
                    let Some(wi) = wcp[i] else { continue };
                    let (_, oi, di) = problem.cams[problem.residuals[i].cam.expect("free camera")];
                    let wv = wi * inv;
                    let t = wv * gp[p];
                    for a in 0..di {
                        rhs[oi + a] += t[a];
                    }
                    for &j in obs {
                        let Some(wj) = wcp[j] else { continue };
                        let (_, oj, dj) = problem.cams[problem.residuals[j].cam.expect("free camera")];
                        let blk = wv * wj.transpose();
                        for a in 0..di {
                            for b in 0..dj {
                                s[(oi + a, oj + b)] -= blk[(a, b)];
                            }
                        }
                    }
                }
                vinv.push(inv);
            }
            if vinv.len() != vpp.len() {
                continue;
            }
            let delta_c = if nc == 0 {
                DVector::zeros(0)
            } else {
                match s.cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                }
            };

            let mut cand = out.clone();
            for &(frame, off, dim) in &problem.cams {
                let pose = out.poses[frame].expect("registered");
                let w = Vec3::new(delta_c[off], delta_c[off + 1], delta_c[off + 2]);
                let rot = exp_so3(&w) * pose.rotation();
                let t = if dim == 5 {
                    (pose.translation() + basis * nalgebra::Vector2::new(delta_c[off + 3], delta_c[off + 4]))
                        .normalize()
                } else {
                    pose.translation() + Vec3::new(delta_c[off + 3], delta_c[off + 4], delta_c[off + 5])
                };
                cand.poses[frame] = Some(Pose::from_rotation_matrix(&rot, t));
            }
            for (p, id) in problem.point_ids.iter().enumerate() {
                let mut g = -gp[p];
                for &i in &problem.by_point[p] {
                    if let Some(wi) = wcp[i] {
                        let (_, oi, di) = problem.cams[problem.residuals[i].cam.expect("free camera")];
                        for a in 0..di {
                            g -= wi.row(a).transpose() * delta_c[oi + a];
                        }
                    }
                }
                let dp = vinv[p] * g;
                let x = cand.landmarks.get_mut(id).expect("landmark");
                *x = Point3::from(x.coords + dp);
            }
            let new_cost = reprojection_cost(&cand, k, huber);
            if new_cost < cost {
                let rel = (cost - new_cost) / cost;
                out = cand;
                cost = new_cost;
                accepted_steps += 1;
                lambda = (lambda / 3.0).max(1e-15);
                if rel < cfg.rel_tol {
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
        }
    }

    let diverged = accepted_steps == 0 && initial_cost > 1e-12;
    if diverged {
        out = recon.clone();
        out.regauge()?;
        cost = initial_cost;
    }
    debug_assert!(cost <= initial_cost);
    out.rmse = out.compute_rmse(k);
    out.bundle = Some(BaSummary { initial_cost, final_cost: cost, iterations, accepted_steps, diverged });
    Ok(out)
}
