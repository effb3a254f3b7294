//! Simulated tracker: corrupts ground-truth tracks with level-calibrated
//! noise and emits synthetic uncertainty logits.

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pixel;
use crate::rng::{self, Rng};
use crate::tracks::{Logits, TrackError, TrackSet};
use crate::uncertainty::{label_error, UncertaintyConfig, UncertaintyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackerSimError {
    #[error("invalid noise profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Tracks(#[from] TrackError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

/// How displacement magnitudes are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DisplacementModel {
    /// Uniform magnitude inside the latent level's interval, random direction.
    LevelIntervals,
    /// Isotropic Gaussian displacement with per-axis sigma (px).
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Probability of each latent quality level; one entry per level.
    pub level_weights: Vec<f64>,
    /// Displacement magnitude range `[lo, hi)` per level (px).
    pub level_ranges: Vec<(f64, f64)>,
    pub displacement: DisplacementModel,
    pub visibility_flip_prob: f64,
    pub logit_sharpness: f64,
    pub confusion_prob: f64,
    /// Thresholds used to label the injected error.
    pub levels: UncertaintyConfig,
    pub seed: u64,
}

/// Cap on the unbounded top interval (px).
pub const TOP_LEVEL_CAP: f64 = 30.0;

/// `[l_{k-1}, min(l_k, cap))` for every level of `cfg`.
pub fn default_level_ranges(cfg: &UncertaintyConfig, cap: f64) -> Vec<(f64, f64)> {
    (1..=cfg.n_levels).map(|k| (cfg.bound(k - 1), cfg.bound(k).min(cap))).collect()
}

impl Default for NoiseProfile {
    fn default() -> Self {
        let levels = UncertaintyConfig::default();
        Self {
            level_weights: vec![1.0, 0.0, 0.0, 0.0, 0.0],
            level_ranges: default_level_ranges(&levels, TOP_LEVEL_CAP),
            displacement: DisplacementModel::LevelIntervals,
            visibility_flip_prob: 0.0,
            logit_sharpness: 10.0,
            confusion_prob: 0.0,
            levels,
            seed: 0,
        }
    }
}

impl NoiseProfile {
    /// Every track exactly on ground truth.
    pub fn noiseless() -> Self {
        let mut p = Self::default();
        p.level_ranges[0] = (0.0, 0.0);
        p
    }

    /// All tracks drawn from one level.
    pub fn single_level(level: u8) -> Self {
        let mut p = Self::default();
        p.level_weights = (1..=p.levels.n_levels).map(|k| if k == level as usize { 1.0 } else { 0.0 }).collect();
        p
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self { displacement: DisplacementModel::Gaussian { sigma }, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrackerSimError> {
        let err = |m: String| Err(TrackerSimError::InvalidProfile(m));
        self.levels.validate()?;
        let n = self.levels.n_levels;
        if self.level_weights.len() != n || self.level_ranges.len() != n {
            return err(format!("need {n} level weights and ranges"));
        }
        if self.level_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return err("level weights must be non-negative".into());
        }
        let sum: f64 = self.level_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return err(format!("level weights sum to {sum}"));
        }
        if self.level_ranges.iter().any(|&(lo, hi)| !(lo >= 0.0 && hi >= lo && hi.is_finite())) {
            return err("level ranges must satisfy 0 <= lo <= hi < inf".into());
        }
        if !(self.logit_sharpness.is_finite() && self.logit_sharpness >= 0.0) {
            return err("logit sharpness must be non-negative".into());
        }
        for (name, p) in [("visibility_flip_prob", self.visibility_flip_prob), ("confusion_prob", self.confusion_prob)]
        {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} must be a probability"));
            }
        }
        if let DisplacementModel::Gaussian { sigma } = self.displacement {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return err("gaussian sigma must be non-negative".into());
            }
        }
        Ok(())
    }
}

/// Corrupted tracks plus the displacement injected into each observation.
#[derive(Debug, Clone)]
pub struct Corruption {
    pub tracks: TrackSet,
    /// Latent level per track.
    pub track_levels: Vec<u8>,
    /// Injected displacement per observation (frame-major); zero when invisible.
    pub displacements: Vec<Pixel>,
}

pub fn corrupt_tracks(gt: &TrackSet, profile: &NoiseProfile) -> Result<TrackSet, TrackerSimError> {
    corrupt_tracks_detailed(gt, profile).map(|c| c.tracks)
}

/// Corrupts every visible observation and records the ground-truth error level
/// of each observation in `gt_levels`.
pub fn corrupt_tracks_detailed(gt: &TrackSet, profile: &NoiseProfile) -> Result<Corruption, TrackerSimError> {
    profile.validate()?;
    let mut rng = rng::seeded(profile.seed, rng::stream::CORRUPTION);
    let pick =
        WeightedIndex::new(&profile.level_weights).map_err(|e| TrackerSimError::InvalidProfile(e.to_string()))?;
    let n = gt.num_points();
    let track_levels: Vec<u8> = (0..n).map(|_| pick.sample(&mut rng) as u8 + 1).collect();

    let mut out = gt.clone();
    let mut levels = vec![0u8; gt.num_frames() * n];
    let mut displacements = vec![Pixel::zeros(); gt.num_frames() * n];
    for t in 0..gt.num_frames() {
        for i in 0..n {
            let k = track_levels[i];
            let obs = t * n + i;
            levels[obs] = k;
            let mut visible = gt.visible(t, i);
            let p = gt.position(t, i);
            if profile.visibility_flip_prob > 0.0
                && rng.random_bool(profile.visibility_flip_prob)
                && p.x.is_finite()
                && p.y.is_finite()
            {
                visible = !visible;
                out.set_visible(t, i, visible);
            }
            if !visible {
                continue;
            }
            let d = match profile.displacement {
                DisplacementModel::LevelIntervals => {
                    let (lo, hi) = profile.level_ranges[k as usize - 1];
                    let mag = if hi > lo { rng.random_range(lo..hi) } else { lo };
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    Pixel::new(angle.cos(), angle.sin()) * mag
                }
                DisplacementModel::Gaussian { sigma } => {
                    if sigma > 0.0 {
                        let normal = Normal::new(0.0, sigma).expect("valid sigma");
                        Pixel::new(normal.sample(&mut rng), normal.sample(&mut rng))
                    } else {
                        Pixel::zeros()
                    }
                }
            };
            displacements[obs] = d;
            out.set_position(t, i, p + d);
            levels[obs] = label_error(d.norm(), &profile.levels)?;
        }
    }
    out.set_gt_levels(Some(levels))?;
    Ok(Corruption { tracks: out, track_levels, displacements })
}

/// One logit vector per level: `sharpness` at the (possibly confused) level,
/// zero elsewhere. Output is flat, `levels.len() x n_levels`.
pub fn emit_logits(
    levels: &[u8],
    n_levels: usize,
    sharpness: f64,
    confusion_prob: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>, TrackerSimError> {
    if n_levels == 0 || !(0.0..=1.0).contains(&confusion_prob) {
        return Err(TrackerSimError::InvalidProfile("need n_levels > 0 and confusion_prob in [0, 1]".into()));
    }
    let mut out = vec![0.0; levels.len() * n_levels];
    for (o, &y) in levels.iter().enumerate() {
        if y == 0 || y as usize > n_levels {
            return Err(UncertaintyError::InvalidLabel { label: y, n_levels }.into());
        }
        let mut peak = y as usize - 1;
        if n_levels > 1 && confusion_prob > 0.0 && rng.random_bool(confusion_prob) {
            let other = rng.random_range(0..n_levels - 1);
            peak = if other >= peak { other + 1 } else { other };
        }
        out[o * n_levels + peak] = sharpness;
    }
    Ok(out)
}

/// Attaches logits derived from the track set's ground-truth levels.
pub fn attach_logits(tracks: &TrackSet, profile: &NoiseProfile) -> Result<TrackSet, TrackerSimError> {
    let levels = tracks
        .gt_levels()
        .ok_or_else(|| TrackerSimError::InvalidProfile("track set has no ground-truth levels".into()))?;
    let mut rng = rng::seeded(profile.seed, rng::stream::LOGITS);
    let n_levels = profile.levels.n_levels;
    let values = emit_logits(levels, n_levels, profile.logit_sharpness, profile.confusion_prob, &mut rng)?;
    let mut out = tracks.clone();
    out.set_logits(Some(Logits { n_levels, values }))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::{label_from_logits, softmax_probs};

    fn grid_tracks(t: usize, n: usize) -> TrackSet {
        let pos = (0..t * n).map(|i| Pixel::new((i % n) as f64 * 5.0, (i / n) as f64 * 3.0 + 100.0)).collect();
        TrackSet::new(t, (0..n as u32).collect(), pos, vec![true; t * n]).unwrap()
    }

    #[test]
    fn zero_width_level_is_identity() {
        let gt = grid_tracks(4, 50);
        let out = corrupt_tracks(&gt, &NoiseProfile::noiseless()).unwrap();
        assert_eq!(out.positions(), gt.positions());
        assert!(out.gt_levels().unwrap().iter().all(|&l| l == 1));
    }

    #[test]
    fn level_three_stays_in_interval() {
        let gt = grid_tracks(8, 200);
        let out = corrupt_tracks_detailed(&gt, &NoiseProfile::single_level(3)).unwrap();
        for d in &out.displacements {
            assert!((3.0..5.0).contains(&d.norm()), "{}", d.norm());
        }
        assert!(out.tracks.gt_levels().unwrap().iter().all(|&l| l == 3));
    }

    #[test]
    fn deterministic_per_seed() {
        let gt = grid_tracks(8, 100);
        let mut p = NoiseProfile { level_weights: vec![0.2; 5], visibility_flip_prob: 0.1, ..Default::default() };
        let a = corrupt_tracks(&gt, &p).unwrap();
        let b = corrupt_tracks(&gt, &p).unwrap();
        assert!(a.bitwise_eq(&b));
        p.seed = 1;
        assert!(!corrupt_tracks(&gt, &p).unwrap().bitwise_eq(&a));
    }

    #[test]
    fn mean_error_increases_with_level() {
        let gt = grid_tracks(10, 200);
        let means: Vec<f64> = (1..=5)
            .map(|k| {
                let c = corrupt_tracks_detailed(&gt, &NoiseProfile::single_level(k)).unwrap();
                c.displacements.iter().map(|d| d.norm()).sum::<f64>() / c.displacements.len() as f64
            })
            .collect();
        assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    }

    #[test]
    fn logits_examples() {
        let mut rng = rng::seeded(0, 0);
        let z = emit_logits(&[2], 5, 10.0, 0.0, &mut rng).unwrap();
        assert_eq!(label_from_logits(&z), 2);
        let z = emit_logits(&[4], 5, 0.0, 0.0, &mut rng).unwrap();
        assert!(softmax_probs(&z).iter().all(|p| (p - 0.2).abs() < 1e-15));

        let levels: Vec<u8> = (0..10_000).map(|i| (i % 5) as u8 + 1).collect();
        let z = emit_logits(&levels, 5, 10.0, 0.25, &mut rng::seeded(42, 0)).unwrap();
        let correct = levels.iter().enumerate().filter(|&(o, &y)| label_from_logits(&z[o * 5..o * 5 + 5]) == y).count();
        let rate = correct as f64 / levels.len() as f64;
        assert!((rate - 0.75).abs() < 0.02, "{rate}");
    }

    #[test]
    fn perfect_logits_recover_levels() {
        let gt = grid_tracks(6, 80);
        let p = NoiseProfile { level_weights: vec![0.2; 5], ..Default::default() };
        let noisy = attach_logits(&corrupt_tracks(&gt, &p).unwrap(), &p).unwrap();
        for t in 0..6 {
            for i in 0..80 {
                assert_eq!(label_from_logits(noisy.logit(t, i).unwrap()), noisy.gt_level(t, i).unwrap());
            }
        }
    }

    #[test]
    fn invalid_profiles() {
        let p = NoiseProfile { level_weights: vec![0.5, 0.4, 0.0, 0.0, 0.0], ..Default::default() };
        assert!(p.validate().is_err());
        let p = NoiseProfile { confusion_prob: 1.5, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
