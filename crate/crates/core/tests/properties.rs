//! Property-based invariants across the public API.

use posebench::geometry::Pixel;
use posebench::geometry::{exp_so3, relative_pose, rotation_angle_deg, umeyama_align, Pose, SimilarityTransform, Vec3};
use posebench::io::{parse_trajectory, trajectory_to_json};
use posebench::metrics::{align_trajectory, ap_at_threshold, ate_rmse, rpe};
use posebench::rng;
use posebench::scene::subsample_frames;
use posebench::trackersim::{corrupt_tracks_detailed, NoiseProfile};
use posebench::tracks::{Logits, TrackSet};
use posebench::trajgen::{generate_trajectory, Trajectory, TrajectoryMode, TrajectoryParams};
use posebench::uncertainty::{
    label_error, label_from_logits, select_keypoints, softmax_probs, SelectionStrategy, UncertaintyConfig,
};
use proptest::prelude::*;

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(3.0), vec3(5.0)).prop_map(|(w, t)| Pose::from_rotation_matrix(&exp_so3(&w), t))
}

fn mode() -> impl Strategy<Value = TrajectoryMode> {
    prop_oneof![Just(TrajectoryMode::Circling), Just(TrajectoryMode::RandomWalk), Just(TrajectoryMode::NoisyCircle)]
}

fn trajectory(min: usize) -> impl Strategy<Value = Trajectory> {
    (mode(), min..24usize, any::<u64>()).prop_map(|(mode, num_frames, seed)| {
        generate_trajectory(&TrajectoryParams { mode, num_frames, seed, ..Default::default() }).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pose_inverse_composes_to_identity(p in pose(), x in vec3(2.0)) {
        let id = p.compose(&p.inverse());
        prop_assert!(rotation_angle_deg(&id) < 1e-9);
        prop_assert!(id.translation().norm() < 1e-9);
        prop_assert!((p.inverse().transform(&p.transform(&x)) - x).norm() < 1e-9);
    }

    #[test]
    fn relative_pose_chains(a in pose(), b in pose(), c in pose()) {
        let chained = relative_pose(&b, &c).compose(&relative_pose(&a, &b));
        let direct = relative_pose(&a, &c);
        prop_assert!(rotation_angle_deg(&chained.compose(&direct.inverse())) < 1e-8);
        prop_assert!((chained.translation() - direct.translation()).norm() < 1e-9);
    }

    #[test]
    fn camera_center_maps_to_origin(p in pose()) {
        prop_assert!(p.transform(&p.center()).norm() < 1e-9);
    }

    #[test]
    fn umeyama_recovers_similarity(w in vec3(3.0), t in vec3(5.0), log_s in -1.0..1.0f64, pts in prop::collection::vec(vec3(1.0), 4..30)) {
        let truth = SimilarityTransform { scale: 10f64.powf(log_s), rotation: exp_so3(&w), translation: t };
        let dst: Vec<Vec3> = pts.iter().map(|p| truth.apply(p)).collect();
        // Reject near-collinear clouds, which are legitimately rejected.
        if let Ok(est) = umeyama_align(&pts, &dst) {
            for (p, q) in pts.iter().zip(&dst) {
                prop_assert!((est.apply(p) - q).norm() < 1e-7 * (1.0 + q.norm()));
            }
        }
    }

    #[test]
    fn aligned_ate_of_similar_copy_vanishes(gt in trajectory(3), w in vec3(3.0), t in vec3(2.0), log_s in -1.0..1.0f64) {
        let sim = SimilarityTransform { scale: 10f64.powf(log_s), rotation: exp_so3(&w), translation: t };
        let pred = gt.transform_similarity(&sim);
        let (aligned, _) = align_trajectory(&pred, &gt).unwrap();
        prop_assert!(ate_rmse(&aligned, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn rpe_is_zero_for_world_transformed_copy(gt in trajectory(2), w in pose()) {
        let (m, deg) = rpe(&gt.transform_world(&w), &gt).unwrap();
        prop_assert!(m < 1e-9 && deg < 1e-6, "rpe ({m}, {deg})");
    }

    #[test]
    fn ap_is_a_monotone_fraction(values in prop::collection::vec(prop::option::of(0.0..10.0f64), 1..40), a in 0.0..12.0f64, b in 0.0..12.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (ap_at_threshold(&values, lo), ap_at_threshold(&values, hi));
        prop_assert!((0.0..=1.0).contains(&x) && x <= y);
    }

    #[test]
    fn error_labels_are_monotone(a in 0.0..50.0f64, b in 0.0..50.0f64) {
        let cfg = UncertaintyConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(label_error(lo, &cfg).unwrap() <= label_error(hi, &cfg).unwrap());
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0..50.0f64, 1..8)) {
        let p = softmax_probs(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let best = p.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        prop_assert_eq!(label_from_logits(&logits) as usize, best + 1);
    }

    #[test]
    fn trajectory_json_round_trips(traj in trajectory(2)) {
        let json = trajectory_to_json(&traj);
        let back = parse_trajectory(&json).unwrap();
        prop_assert!(!back.renormalized);
        prop_assert_eq!(&back.trajectory, &traj);
        prop_assert_eq!(trajectory_to_json(&back.trajectory), json);
    }

    #[test]
    fn subsampled_frames_respect_gap(total in 2usize..200, n in 2usize..12, k_max in 1usize..6, seed in any::<u64>()) {
        let mut r = rng::seeded(seed, rng::stream::SUBSAMPLE);
        if let Ok(frames) = subsample_frames(total, n, k_max, &mut r) {
            prop_assert_eq!(frames.len(), n);
            prop_assert!(frames.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= k_max));
            prop_assert!(*frames.last().unwrap() < total);
        }
    }

    #[test]
    fn injected_errors_stay_in_level_interval(seed in any::<u64>(), level in 1u8..=5) {
        let frames = 3;
        let n = 40;
        let pos = vec![Pixel::new(100.0, 100.0); frames * n];
        let gt = TrackSet::new(frames, (0..n as u32).collect(), pos, vec![true; frames * n]).unwrap();
        let profile = NoiseProfile { seed, ..NoiseProfile::single_level(level) };
        let out = corrupt_tracks_detailed(&gt, &profile).unwrap();
        let (lo, hi) = profile.level_ranges[level as usize - 1];
        let levels = out.tracks.gt_levels().unwrap();
        for i in 0..frames * n {
            let e = (out.tracks.positions()[i] - gt.positions()[i]).norm();
            prop_assert_eq!(levels[i], level);
            prop_assert!(e >= lo - 1e-9 && e <= hi + 1e-9, "error {e} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn ranking_keeps_the_requested_share(seed in any::<u64>(), n in 1usize..60, ratio in 0.05..1.0f64) {
        let mut r = rng::seeded(seed, rng::stream::LOGITS);
        let frames = 2;
        let vis: Vec<bool> = (0..frames * n).map(|_| rand::Rng::random_bool(&mut r, 0.8)).collect();
        let pos = vec![Pixel::new(10.0, 10.0); frames * n];
        let mut ts = TrackSet::new(frames, (0..n as u32).collect(), pos, vis).unwrap();
        let values = (0..frames * n * 5).map(|_| rand::Rng::random_range(&mut r, -5.0..5.0)).collect();
        ts.set_logits(Some(Logits { n_levels: 5, values })).unwrap();
        let kept = select_keypoints(&ts, SelectionStrategy::ByRanking, ratio).unwrap();
        for (t, ids) in kept.iter().enumerate() {
            let valid = ts.visible_count(t);
            let want = ((ratio * valid as f64).floor() as usize).max(4).min(valid);
            prop_assert_eq!(ids.len(), want);
            prop_assert!(ids.iter().all(|&id| ts.visible(t, ts.index_of(id).unwrap())));
        }
    }
}
