//! Discrete tracking-error levels, their losses, and uncertainty-driven
//! keypoint selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pixel;
use crate::tracks::TrackSet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UncertaintyError {
    #[error("invalid uncertainty config: {0}")]
    InvalidConfig(String),
    #[error("tracking error must be finite and non-negative, got {0}")]
    InvalidError(f64),
    #[error("label {label} outside 1..={n_levels}")]
    InvalidLabel { label: u8, n_levels: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("strategy requires logits but the track set has none")]
    MissingLogits,
}

/// Level thresholds `L`; an error `e` has level `k` when `l_{k-1} <= e < l_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub n_levels: usize,
    /// Upper interval bounds in pixels; the last one is infinite (`null` on disk).
    #[serde(with = "infinite_as_null")]
    pub thresholds: Vec<f64>,
    /// Multiplies every finite threshold (input resolution ratio).
    pub resolution_scale: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self { n_levels: 5, thresholds: vec![1.0, 3.0, 5.0, 10.0, f64::INFINITY], resolution_scale: 1.0 }
    }
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        let err = |m: &str| Err(UncertaintyError::InvalidConfig(m.into()));
        if self.n_levels == 0 || self.n_levels > u8::MAX as usize || self.thresholds.len() != self.n_levels {
            return err("n_levels must equal the number of thresholds");
        }
        if !(self.resolution_scale.is_finite() && self.resolution_scale > 0.0) {
            return err("resolution_scale must be positive");
        }
        let (last, finite) = self.thresholds.split_last().expect("non-empty");
        if *last != f64::INFINITY {
            return err("last threshold must be infinite");
        }
        if finite.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return err("finite thresholds must be positive");
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return err("thresholds must be strictly increasing");
        }
        Ok(())
    }

    /// Threshold `l_k` after resolution scaling (`l_0 = 0`).
    pub fn bound(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.thresholds[k - 1] * self.resolution_scale
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_keypoint: f64,
    pub w_vis: f64,
    pub w_uncert: f64,
    pub gamma: f64,
    pub m_iters: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_keypoint: 1.0, w_vis: 5.0, w_uncert: 5.0, gamma: 0.8, m_iters: 4 }
    }
}

/// Level `y` in `1..=n_levels` of a tracking error `e` (pixels).
pub fn label_error(e: f64, cfg: &UncertaintyConfig) -> Result<u8, UncertaintyError> {
    if !(e.is_finite() && e >= 0.0) {
        return Err(UncertaintyError::InvalidError(e));
    }
    let k = (1..=cfg.n_levels).find(|&k| e < cfg.bound(k)).unwrap_or(cfg.n_levels);
    Ok(k as u8)
}

/// Numerically stable softmax.
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Predicted level: 1-based argmax of the logits (lowest level on ties).
pub fn label_from_logits(logits: &[f64]) -> u8 {
    let mut best = 0;
    for (k, z) in logits.iter().enumerate() {
        if *z > logits[best] {
            best = k;
        }
    }
    best as u8 + 1
}

/// Weighted cross entropy `sum_i w(y_i) * -ln p_{i, y_i}`.
pub fn uncertainty_loss(
    probs: &[Vec<f64>],
    labels: &[u8],
    class_weights: Option<&[f64]>,
) -> Result<f64, UncertaintyError> {
    if probs.len() != labels.len() {
        return Err(UncertaintyError::Shape(format!("{} distributions, {} labels", probs.len(), labels.len())));
    }
    let mut loss = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y == 0 || y as usize > p.len() {
            return Err(UncertaintyError::InvalidLabel { label: y, n_levels: p.len() });
        }
        let w = match class_weights {
            Some(w) => *w.get(y as usize - 1).ok_or(UncertaintyError::Shape("class weight count".into()))?,
            None => 1.0,
        };
        loss += w * -p[y as usize - 1].ln();
    }
    Ok(loss)
}

/// Inverse-frequency class weights normalized to mean 1 over present classes;
/// absent classes get weight 0.
pub fn inverse_frequency_weights(labels: &[u8], n_levels: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_levels];
    for &y in labels {
        if (1..=n_levels).contains(&(y as usize)) {
            counts[y as usize - 1] += 1;
        }
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 0 {
        return vec![0.0; n_levels];
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| if c == 0 { 0.0 } else { total as f64 / (present as f64 * c as f64) }).collect()
}

/// Discounted L1 loss over refinement iterates: `sum_m gamma^(M-m) sum_i |P_m,i - P_i|_1`.
pub fn keypoint_loss(iterates: &[Vec<Pixel>], gt: &[Pixel], w: &LossWeights) -> Result<f64, UncertaintyError> {
    if iterates.len() != w.m_iters {
        return Err(UncertaintyError::Shape(format!("expected {} iterates, got {}", w.m_iters, iterates.len())));
    }
    let m_total = iterates.len() as i32;
    let mut loss = 0.0;
    for (m, est) in iterates.iter().enumerate() {
        if est.len() != gt.len() {
            return Err(UncertaintyError::Shape(format!(
                "iterate {m} has {} points, expected {}",
                est.len(),
                gt.len()
            )));
        }
        let l1: f64 = est.iter().zip(gt).map(|(a, b)| (a - b).abs().sum()).sum();
        loss += w.gamma.powi(m_total - (m as i32 + 1)) * l1;
    }
    Ok(loss)
}

/// Binary cross entropy of predicted visibility probabilities.
pub fn visibility_loss(pred: &[f64], gt: &[bool]) -> Result<f64, UncertaintyError> {
    if pred.len() != gt.len() {
        return Err(UncertaintyError::Shape("visibility lengths differ".into()));
    }
    const EPS: f64 = 1e-12;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &v)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if v {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum())
}

pub fn total_loss(kp: f64, vis: f64, unc: f64, w: &LossWeights) -> f64 {
    w.w_keypoint * kp + w.w_vis * vis + w.w_uncert * unc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    None,
    ByLevel,
    ByRanking,
}

impl SelectionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::None => "none",
            SelectionStrategy::ByLevel => "by_level",
            SelectionStrategy::ByRanking => "by_ranking",
        }
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "by_level" => Ok(Self::ByLevel),
            "by_ranking" => Ok(Self::ByRanking),
            other => Err(format!("unknown selection strategy {other:?}")),
        }
    }
}

pub const DEFAULT_KEEP_RATIO: f64 = 0.95;
/// Floor on the number of points `by_ranking` keeps in a view.
pub const MIN_RANKED_POINTS: usize = 4;

/// Per-frame lists of kept point ids (ascending by predicted level, then id,
/// for `by_ranking`; ascending id otherwise).
pub fn select_keypoints(
    tracks: &TrackSet,
    strategy: SelectionStrategy,
    keep_ratio: f64,
) -> Result<Vec<Vec<u32>>, UncertaintyError> {
    if strategy != SelectionStrategy::None && tracks.logits().is_none() {
        return Err(UncertaintyError::MissingLogits);
    }
    let n_levels = tracks.logits().map_or(0, |l| l.n_levels) as u8;
    let mut order: Vec<usize> = (0..tracks.num_points()).collect();
    order.sort_by_key(|&i| tracks.point_ids()[i]);
    Ok((0..tracks.num_frames())
        .map(|t| {
            let valid = order.iter().copied().filter(|&i| tracks.visible(t, i));
            let level = |i: usize| label_from_logits(tracks.logit(t, i).expect("logits present"));
            match strategy {
                SelectionStrategy::None => valid.map(|i| tracks.point_ids()[i]).collect(),
                SelectionStrategy::ByLevel => {
                    valid.filter(|&i| level(i) != n_levels).map(|i| tracks.point_ids()[i]).collect()
                }
                SelectionStrategy::ByRanking => {
                    let mut ranked: Vec<(u8, u32)> = valid.map(|i| (level(i), tracks.point_ids()[i])).collect();
                    ranked.sort();
                    let keep =
                        ((keep_ratio * ranked.len() as f64).floor() as usize).max(MIN_RANKED_POINTS).min(ranked.len());
                    ranked.into_iter().take(keep).map(|(_, id)| id).collect()
                }
            }
        })
        .collect())
}
