//! Incremental reconstruction of one window: best two-view initialization,
//! PnP registration in order of match count, landmark triangulation and
//! global bundle adjustment.

use std::collections::{BTreeMap, BTreeSet};

use super::essential::recover_relative_pose_normalized;
use super::{
    adaptive_iterations, bundle_adjust, estimate_essential_ransac, estimate_homography_ransac, register_view_pnp,
    selected_observations, Correspondence, Observation, Reconstruction, SfmConfig, SfmError, MIN_ESSENTIAL_POINTS,
    MIN_PNP_POINTS,
};
use crate::geometry::{triangulate_dlt, triangulation_angle_deg, CameraIntrinsics, Pixel, Point3, Pose, Vec3};
use crate::tracks::TrackSet;

/// Observations whose pre-adjustment residual exceeds this multiple of
/// `tau_pnp_px` are excluded from the first bundle adjustment.
const COARSE_GATE: f64 = 2.0;

/// Decorrelated sub-seed for one stage of the window (splitmix64 finalizer).
fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct InitPair {
    a: usize,
    b: usize,
    pose_b: Pose,
    inliers: Vec<Correspondence>,
    score: f64,
}

enum PairOutcome {
    Usable(InitPair),
    Degenerate(String),
    Failed(SfmError),
}

fn evaluate_pair(a: usize, b: usize, corrs: &[Correspondence], k: &CameraIntrinsics, cfg: &SfmConfig) -> PairOutcome {
    let pair_cfg = SfmConfig { seed: sub_seed(cfg.seed, (a * 1024 + b) as u64), ..*cfg };
    let est = match estimate_essential_ransac(corrs, k, &pair_cfg) {
        Ok(e) => e,
        Err(e) => return PairOutcome::Failed(e),
    };
    let inliers: Vec<Correspondence> = corrs.iter().zip(&est.inliers).filter(|(_, &b)| b).map(|(c, _)| *c).collect();
    let xa: Vec<Vec3> = inliers.iter().map(|c| k.normalize(&c.pixel_a)).collect();
    let xb: Vec<Vec3> = inliers.iter().map(|c| k.normalize(&c.pixel_b)).collect();
    // If a homography explains the required fraction of inliers, a random
    // minimal sample is clean with probability at least ratio^4; this many
    // draws find it at the configured confidence.
    let h_iters = adaptive_iterations(cfg.homography_ratio, 4, cfg.confidence, cfg.max_iters);
    let h_cfg = SfmConfig { max_iters: h_iters, ..pair_cfg };
    if let Some((_, h_inl)) = estimate_homography_ransac(&xa, &xb, k, &h_cfg) {
        let explained = h_inl.iter().filter(|&&b| b).count();
        if explained as f64 >= cfg.homography_ratio * inliers.len() as f64 {
            return PairOutcome::Degenerate(format!(
                "frames {a}-{b}: a homography explains {explained}/{} inliers (planar scene or pure rotation)",
                inliers.len()
            ));
        }
    }
    let pose_b = match recover_relative_pose_normalized(&est.essential, &xa, &xb) {
        Ok(p) => p,
        Err(e) => return PairOutcome::Failed(e),
    };
    let origin = Pose::identity();
    let cb = pose_b.center();
    let mut angles: Vec<f64> = xa
        .iter()
        .zip(&xb)
        .filter_map(|(p, q)| triangulate_dlt(p, q, &origin, &pose_b))
        .filter(|x| x.z > 0.0 && pose_b.transform(x).z > 0.0)
        .map(|x| triangulation_angle_deg(&x, &Vec3::zeros(), &cb))
        .collect();
    if angles.is_empty() {
        return PairOutcome::Degenerate(format!("frames {a}-{b}: no point triangulates in front of both cameras"));
    }
    angles.sort_by(|x, y| x.total_cmp(y));
    let median = angles[angles.len() / 2];
    if median < cfg.min_init_angle_deg {
        return PairOutcome::Degenerate(format!("frames {a}-{b}: median triangulation angle {median:.4} deg"));
    }
    let score = inliers.len() as f64 * median;
    PairOutcome::Usable(InitPair { a, b, pose_b, inliers, score })
}

fn reprojection_px(pose: &Pose, x: &Vec3, px: &Pixel, k: &CameraIntrinsics) -> Option<f64> {
    k.project_camera(&pose.transform(x)).ok().map(|(p, _)| (p - px).norm())
}

/// Triangulate every selected point that has no landmark yet and is seen by
/// at least two registered frames, using the widest-angle registered pair.
fn triangulate_missing(
    obs: &[BTreeMap<u32, Pixel>],
    poses: &[Option<Pose>],
    landmarks: &mut BTreeMap<u32, Point3>,
    k: &CameraIntrinsics,
    cfg: &SfmConfig,
) {
    let ids: BTreeSet<u32> = obs.iter().flat_map(|m| m.keys().copied()).collect();
    for id in ids {
        if landmarks.contains_key(&id) {
            continue;
        }
        let views: Vec<(Pose, Pixel)> =
            obs.iter().zip(poses).filter_map(|(m, p)| Some(((*p)?, *m.get(&id)?))).collect();
        let mut best: Option<(f64, Vec3)> = None;
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                let (pa, xa) = views[i];
                let (pb, xb) = views[j];
                let Some(x) = triangulate_dlt(&k.normalize(&xa), &k.normalize(&xb), &pa, &pb) else { continue };
                if pa.transform(&x).z <= 0.0 || pb.transform(&x).z <= 0.0 {
                    continue;
                }
                let ok = |p: &Pose, px: &Pixel| reprojection_px(p, &x, px, k).is_some_and(|e| e < cfg.tau_pnp_px);
                if !(ok(&pa, &xa) && ok(&pb, &xb)) {
                    continue;
                }
                let angle = triangulation_angle_deg(&x, &pa.center(), &pb.center());
                if best.is_none_or(|(b, _)| angle > b) {
                    best = Some((angle, x));
                }
            }
        }
        if let Some((angle, x)) = best {
            let in_front = views.iter().all(|(p, _)| p.transform(&x).z > 0.0);
            if angle >= cfg.min_landmark_angle_deg && in_front {
                landmarks.insert(id, Point3::from(x));
            }
        }
    }
}

/// Flag each observation as inlier when its landmark lies in front of the
/// camera and reprojects within `gate` px; then drop landmarks with fewer
/// than two inliers.
fn flag_inliers(recon: &mut Reconstruction, k: &CameraIntrinsics, gate: f64) {
    let mut support: BTreeMap<u32, usize> = BTreeMap::new();
    for i in 0..recon.observations.len() {
        let o = recon.observations[i];
        let inlier = recon.residual(&o, k).is_some_and(|e| e < gate);
        recon.observations[i].inlier = inlier;
        if inlier {
            *support.entry(o.point_id).or_default() += 1;
        }
    }
    recon.landmarks.retain(|id, _| support.get(id).copied().unwrap_or(0) >= 2);
    let landmarks = &recon.landmarks;
    for o in recon.observations.iter_mut() {
        o.inlier &= landmarks.contains_key(&o.point_id);
    }
}

/// Re-anchor the gauge, gate observations coarsely and bundle-adjust the
/// frames registered so far, so that later registrations see refined
/// landmarks.
fn refine_partial(recon: &mut Reconstruction, k: &CameraIntrinsics, cfg: &SfmConfig) -> Result<(), SfmError> {
    recon.regauge()?;
    flag_inliers(recon, k, COARSE_GATE * cfg.tau_pnp_px);
    *recon = bundle_adjust(recon, k, &cfg.bundle)?;
    flag_inliers(recon, k, COARSE_GATE * cfg.tau_pnp_px);
    Ok(())
}

/// Recover up-to-scale poses for every frame of a window from the selected
/// keypoint tracks. Frames that cannot be registered are left as `None`.
pub fn estimate_window_poses(
    tracks: &TrackSet,
    kept: &[Vec<u32>],
    k: &CameraIntrinsics,
    cfg: &SfmConfig,
) -> Result<Reconstruction, SfmError> {
    cfg.validate()?;
    k.validate()?;
    let num_frames = tracks.num_frames();
    if num_frames < 2 {
        return Err(SfmError::InvalidInput(format!("need at least two frames, got {num_frames}")));
    }
    let obs = selected_observations(tracks, kept);

    let mut best: Option<InitPair> = None;
    let mut degenerate: Option<String> = None;
    let mut failure: Option<SfmError> = None;
    let mut max_shared = 0;
    for a in 0..num_frames {
        for b in a + 1..num_frames {
            let corrs: Vec<Correspondence> = obs[a]
                .iter()
                .filter_map(|(&point_id, &pixel_a)| {
                    obs[b].get(&point_id).map(|&pixel_b| Correspondence {
                        point_id,
                        frame_a: a,
                        frame_b: b,
                        pixel_a,
                        pixel_b,
                    })
                })
                .collect();
            max_shared = max_shared.max(corrs.len());
            if corrs.len() < MIN_ESSENTIAL_POINTS {
                continue;
            }
            match evaluate_pair(a, b, &corrs, k, cfg) {
                PairOutcome::Usable(p) => {
                    if best.as_ref().is_none_or(|q| p.score > q.score) {
                        best = Some(p);
                    }
                }
                PairOutcome::Degenerate(msg) => {
                    degenerate.get_or_insert(msg);
                }
                PairOutcome::Failed(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
    }
    if max_shared < MIN_ESSENTIAL_POINTS {
        return Err(SfmError::InsufficientPoints { needed: MIN_ESSENTIAL_POINTS, available: max_shared });
    }
    let Some(init) = best else {
        return Err(match (degenerate, failure) {
            (Some(msg), _) => SfmError::DegenerateGeometry(msg),
            (None, Some(e)) => e,
            (None, None) => SfmError::NoConsensus { inliers: 0, total: max_shared },
        });
    };

    let mut poses: Vec<Option<Pose>> = vec![None; num_frames];
    poses[init.a] = Some(Pose::identity());
    poses[init.b] = Some(init.pose_b);
    let mut landmarks = BTreeMap::new();
    let init_obs: Vec<BTreeMap<u32, Pixel>> = (0..num_frames)
        .map(|t| {
            let side = |c: &Correspondence| {
                if t == init.a {
                    Some(c.pixel_a)
                } else if t == init.b {
                    Some(c.pixel_b)
                } else {
                    None
                }
            };
            init.inliers.iter().filter_map(|c| side(c).map(|p| (c.point_id, p))).collect()
        })
        .collect();
    triangulate_missing(&init_obs, &poses, &mut landmarks, k, cfg);

    let observations = obs
        .iter()
        .enumerate()
        .flat_map(|(frame, m)| {
            m.iter().map(move |(&point_id, &pixel)| Observation { frame, point_id, pixel, inlier: false })
        })
        .collect();
    let mut recon =
        Reconstruction { poses, landmarks, observations, init_pair: (init.a, init.b), rmse: 0.0, bundle: None };
    refine_partial(&mut recon, k, cfg)?;

    let mut failed = BTreeSet::new();
    loop {
        let candidate = (0..num_frames)
            .filter(|f| recon.poses[*f].is_none() && !failed.contains(f))
            .map(|f| (obs[f].keys().filter(|id| recon.landmarks.contains_key(id)).count(), f))
            .filter(|(n, _)| *n >= MIN_PNP_POINTS)
            .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)));
        let Some((_, f)) = candidate else { break };
        let (pts, px): (Vec<Point3>, Vec<Pixel>) =
            obs[f].iter().filter_map(|(id, p)| recon.landmarks.get(id).map(|x| (*x, *p))).unzip();
        let pnp_cfg = SfmConfig { seed: sub_seed(cfg.seed, 1_000_000 + f as u64), ..*cfg };
        match register_view_pnp(&pts, &px, k, &pnp_cfg) {
            Ok(est) => {
                recon.poses[f] = Some(est.pose);
                triangulate_missing(&obs, &recon.poses, &mut recon.landmarks, k, cfg);
                refine_partial(&mut recon, k, cfg)?;
            }
            Err(_) => {
                failed.insert(f);
            }
        }
    }

    flag_inliers(&mut recon, k, cfg.tau_pnp_px);
    recon = bundle_adjust(&recon, k, &cfg.bundle)?;
    flag_inliers(&mut recon, k, cfg.tau_pnp_px);
    recon.rmse = recon.compute_rmse(k);
    debug_assert!(recon.validate().is_ok(), "{:?}", recon.validate());
    Ok(recon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, rotation_matrix_angle_deg};
    use crate::sfm::fixtures::{cloud, ring_poses};

    fn tracks_for(points: &[Point3], poses: &[Pose], k: &CameraIntrinsics) -> TrackSet {
        let pos = poses.iter().flat_map(|p| points.iter().map(move |x| project(x, p, k).unwrap().pixel)).collect();
        TrackSet::new(poses.len(), (0..points.len() as u32).collect(), pos, vec![true; poses.len() * points.len()])
            .unwrap()
    }

    fn all_kept(ts: &TrackSet) -> Vec<Vec<u32>> {
        vec![ts.point_ids().to_vec(); ts.num_frames()]
    }

    #[test]
    fn ring_window_registers_every_frame() {
        let k = CameraIntrinsics::default();
        let poses = ring_poses(8, 3.0, 60.0);
        let ts = tracks_for(&cloud(200, 21), &poses, &k);
        let recon = estimate_window_poses(&ts, &all_kept(&ts), &k, &SfmConfig::default()).unwrap();
        assert!(recon.is_fully_registered());
        recon.validate().unwrap();
        assert!(recon.rmse < 1e-6, "rmse {}", recon.rmse);
        let est = recon.full_poses().unwrap();
        for (a, b) in [(0, 3), (2, 7), (5, 6)] {
            let rel_est = crate::geometry::relative_pose(&est[a], &est[b]);
            let rel_gt = crate::geometry::relative_pose(&poses[a], &poses[b]);
            let err = rotation_matrix_angle_deg(&(rel_est.rotation().transpose() * rel_gt.rotation()));
            assert!(err < 1e-6, "relative rotation error {err}");
        }
    }

    #[test]
    fn static_window_is_degenerate() {
        let k = CameraIntrinsics::default();
        let poses = vec![ring_poses(1, 3.0, 0.0)[0]; 8];
        let ts = tracks_for(&cloud(200, 22), &poses, &k);
        let res = estimate_window_poses(&ts, &all_kept(&ts), &k, &SfmConfig::default());
        assert!(matches!(res, Err(SfmError::DegenerateGeometry(_))), "{res:?}");
    }

    #[test]
    fn coplanar_points_are_degenerate() {
        let k = CameraIntrinsics::default();
        let poses = ring_poses(8, 3.0, 60.0);
        let pts: Vec<Point3> = cloud(200, 23).iter().map(|p| Point3::new(p.x, p.y, 0.3 * p.x)).collect();
        let ts = tracks_for(&pts, &poses, &k);
        let res = estimate_window_poses(&ts, &all_kept(&ts), &k, &SfmConfig::default());
        assert!(matches!(res, Err(SfmError::DegenerateGeometry(_))), "{res:?}");
    }

    #[test]
    fn four_points_are_insufficient() {
        let k = CameraIntrinsics::default();
        let ts = tracks_for(&cloud(4, 24), &ring_poses(8, 3.0, 60.0), &k);
        let res = estimate_window_poses(&ts, &all_kept(&ts), &k, &SfmConfig::default());
        assert_eq!(res, Err(SfmError::InsufficientPoints { needed: 8, available: 4 }));
    }

    #[test]
    fn scaled_scene_gives_identical_output() {
        let k = CameraIntrinsics::default();
        let poses = ring_poses(8, 3.0, 60.0);
        let pts = cloud(120, 25);
        let scaled_pts: Vec<Point3> = pts.iter().map(|p| Point3::from(p.coords * 2.5)).collect();
        let scaled_poses: Vec<Pose> = poses.iter().map(|p| p.with_translation(p.translation() * 2.5)).collect();
        let a = tracks_for(&pts, &poses, &k);
        let b = tracks_for(&scaled_pts, &scaled_poses, &k);
        let ra = estimate_window_poses(&a, &all_kept(&a), &k, &SfmConfig::default()).unwrap();
        let rb = estimate_window_poses(&b, &all_kept(&b), &k, &SfmConfig::default()).unwrap();
        assert!(a.positions().iter().zip(b.positions()).all(|(p, q)| (p - q).norm() < 1e-9));
        if a.bitwise_eq(&b) {
            assert_eq!(ra, rb);
        } else {
            let (pa, pb) = (ra.full_poses().unwrap(), rb.full_poses().unwrap());
            assert!(pa.iter().zip(&pb).all(|(x, y)| (x.translation() - y.translation()).norm() < 1e-6));
        }
    }
}
