//! Motion-gated keyframe selection and window chopping.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tracks::TrackSet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KeyframeError {
    #[error("need {needed} keyframes, got {available}")]
    InsufficientFrames { needed: usize, available: usize },
    #[error("invalid gate config: {0}")]
    InvalidConfig(String),
}

/// Which frame a candidate is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReference {
    /// The last accepted keyframe, so slow motion accumulates.
    LastAccepted,
    /// The immediately preceding frame.
    Adjacent,
}

/// How pairwise distance ratios are reduced to one scale-change statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleReducer {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionGateConfig {
    /// Mean probe displacement threshold (px).
    pub t_dis: f64,
    /// Pairwise distance ratio threshold.
    pub t_scale: f64,
    pub window_len: usize,
    /// Probe lattice spacing on the first mask (px).
    pub probe_grid: u32,
    /// Probes used for the pairwise scale test.
    pub max_scale_probes: usize,
    pub reference: GateReference,
    pub reducer: ScaleReducer,
    pub seed: u64,
}

impl Default for MotionGateConfig {
    fn default() -> Self {
        Self {
            t_dis: 2.0,
            t_scale: 1.3,
            window_len: 8,
            probe_grid: 50,
            max_scale_probes: 32,
            reference: GateReference::LastAccepted,
            reducer: ScaleReducer::Max,
            seed: 0,
        }
    }
}

impl MotionGateConfig {
    pub fn validate(&self) -> Result<(), KeyframeError> {
        let err = |m: &str| Err(KeyframeError::InvalidConfig(m.into()));
        if !(self.t_dis > 0.0) {
            return err("t_dis must be positive");
        }
        if !(self.t_scale > 1.0) {
            return err("t_scale must exceed 1");
        }
        if self.window_len < 2 {
            return err("window_len must be at least 2");
        }
        if self.probe_grid == 0 || self.max_scale_probes < 2 {
            return err("probe_grid must be positive and max_scale_probes at least 2");
        }
        Ok(())
    }
}

/// Outcome of the two motion tests for one accepted frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub frame: usize,
    pub mean_displacement: f64,
    pub scale_change: f64,
    pub by_displacement: bool,
    pub by_scale: bool,
}

/// Accepted frame indices; frame 0 is always accepted.
pub fn gate_frames(tracks: &TrackSet, cfg: &MotionGateConfig) -> Result<Vec<usize>, KeyframeError> {
    Ok(gate_frames_explained(tracks, cfg)?.iter().map(|d| d.frame).collect())
}

/// Like [`gate_frames`] but reports which tests accepted each frame.
pub fn gate_frames_explained(tracks: &TrackSet, cfg: &MotionGateConfig) -> Result<Vec<GateDecision>, KeyframeError> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed, rng::stream::KEYFRAME);
    let mut out = vec![GateDecision {
        frame: 0,
        mean_displacement: 0.0,
        scale_change: 1.0,
        by_displacement: false,
        by_scale: false,
    }];
    let mut last = 0;
    for t in 1..tracks.num_frames() {
        let reference = match cfg.reference {
            GateReference::LastAccepted => last,
            GateReference::Adjacent => t - 1,
        };
        let common: Vec<usize> =
            (0..tracks.num_points()).filter(|&i| tracks.visible(reference, i) && tracks.visible(t, i)).collect();
        if common.is_empty() {
            continue;
        }
        let mean_displacement =
            common.iter().map(|&i| (tracks.position(t, i) - tracks.position(reference, i)).norm()).sum::<f64>()
                / common.len() as f64;

        let probes: Vec<usize> = if common.len() > cfg.max_scale_probes {
            let mut pick = index::sample(&mut rng, common.len(), cfg.max_scale_probes).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|k| common[k]).collect()
        } else {
            common
        };
        let mut ratios = Vec::new();
        for (a, &i) in probes.iter().enumerate() {
            for &j in &probes[a + 1..] {
                let d0 = (tracks.position(reference, i) - tracks.position(reference, j)).norm();
                let d1 = (tracks.position(t, i) - tracks.position(t, j)).norm();
                if d0 > 1e-9 && d1 > 1e-9 {
                    let r = d1 / d0;
                    ratios.push(r.max(1.0 / r));
                }
            }
        }
        let scale_change = match cfg.reducer {
            _ if ratios.is_empty() => 1.0,
            ScaleReducer::Max => ratios.iter().copied().fold(1.0, f64::max),
            ScaleReducer::Mean => ratios.iter().sum::<f64>() / ratios.len() as f64,
        };
        let by_displacement = mean_displacement > cfg.t_dis;
        let by_scale = scale_change > cfg.t_scale;
        if by_displacement || by_scale {
            out.push(GateDecision { frame: t, mean_displacement, scale_change, by_displacement, by_scale });
            last = t;
        }
    }
    Ok(out)
}

/// Consecutive disjoint windows of exactly `window_len` keyframes; the
/// trailing remainder is dropped.
pub fn chop_windows(keyframes: &[usize], window_len: usize) -> Result<Vec<Vec<usize>>, KeyframeError> {
    if window_len == 0 {
        return Err(KeyframeError::InvalidConfig("window_len must be positive".into()));
    }
    if keyframes.len() < window_len {
        return Err(KeyframeError::InsufficientFrames { needed: window_len, available: keyframes.len() });
    }
    Ok(keyframes.chunks_exact(window_len).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pixel;

    fn probes(frames: usize, f: impl Fn(usize, Pixel) -> Pixel) -> TrackSet {
        let base: Vec<Pixel> = (0..5)
            .flat_map(|i| (0..5).map(move |j| Pixel::new(i as f64 * 50.0 - 100.0, j as f64 * 50.0 - 100.0)))
            .collect();
        let pos = (0..frames)
            .flat_map(|t| base.iter().map(|p| f(t, *p) + Pixel::new(256.0, 256.0)).collect::<Vec<_>>())
            .collect();
        TrackSet::new(frames, (0..base.len() as u32).collect(), pos, vec![true; frames * base.len()]).unwrap()
    }

    #[test]
    fn static_probes_accept_only_first_frame() {
        let ts = probes(10, |_, p| p);
        assert_eq!(gate_frames(&ts, &MotionGateConfig::default()).unwrap(), vec![0]);
    }

    #[test]
    fn translation_accepts_every_frame() {
        let ts = probes(10, |t, p| p + Pixel::new(3.0 * t as f64, 0.0));
        let d = gate_frames_explained(&ts, &MotionGateConfig::default()).unwrap();
        assert_eq!(d.iter().map(|d| d.frame).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
        assert!(d[1..].iter().all(|d| d.by_displacement && !d.by_scale));
    }

    #[test]
    fn zoom_accepts_via_scale() {
        let ts = probes(6, |t, p| p * 1.4f64.powi(t as i32));
        let d = gate_frames_explained(&ts, &MotionGateConfig::default()).unwrap();
        assert_eq!(d.len(), 6);
        assert!(d[1..].iter().all(|d| d.by_scale && (d.scale_change - 1.4).abs() < 1e-9));
    }

    #[test]
    fn slow_motion_accumulates_against_last_keyframe() {
        let ts = probes(10, |t, p| p + Pixel::new(0.9 * t as f64, 0.0));
        assert_eq!(gate_frames(&ts, &MotionGateConfig::default()).unwrap(), vec![0, 3, 6, 9]);
        let adjacent = MotionGateConfig { reference: GateReference::Adjacent, ..Default::default() };
        assert_eq!(gate_frames(&ts, &adjacent).unwrap(), vec![0]);
    }

    #[test]
    fn chopping() {
        let k: Vec<usize> = (0..24).collect();
        assert_eq!(chop_windows(&k, 8).unwrap().len(), 3);
        let w = chop_windows(&k[..20], 8).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1], (8..16).collect::<Vec<_>>());
        assert!(matches!(chop_windows(&k[..7], 8), Err(KeyframeError::InsufficientFrames { .. })));
    }
}
