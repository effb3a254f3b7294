//! Keypoint tracks over a window: per-frame pixel positions, visibility and
//! optional uncertainty annotations.

use thiserror::Error;

use crate::geometry::Pixel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackError {
    #[error("track set needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("visible observation of point {point_id} in frame {frame} has a non-finite position")]
    NonFinite { point_id: u32, frame: usize },
    #[error("uncertainty level {level} outside 1..={n_levels}")]
    LevelOutOfRange { level: u8, n_levels: usize },
}

/// `T` frames by `N` points, stored frame-major.
///
/// Positions of invisible observations are ignored by every consumer and may
/// be NaN (for example when the point is behind the camera).
#[derive(Debug, Clone)]
pub struct TrackSet {
    num_frames: usize,
    point_ids: Vec<u32>,
    positions: Vec<Pixel>,
    visibility: Vec<bool>,
    gt_levels: Option<Vec<u8>>,
    logits: Option<Logits>,
}

/// Per-observation uncertainty logits, `T x N x n_levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub n_levels: usize,
    pub values: Vec<f64>,
}

impl TrackSet {
    pub fn new(
        num_frames: usize,
        point_ids: Vec<u32>,
        positions: Vec<Pixel>,
        visibility: Vec<bool>,
    ) -> Result<Self, TrackError> {
        let ts = Self { num_frames, point_ids, positions, visibility, gt_levels: None, logits: None };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<(), TrackError> {
        if self.num_frames < 2 {
            return Err(TrackError::TooFewFrames(self.num_frames));
        }
        let n = self.point_ids.len() * self.num_frames;
        if self.positions.len() != n || self.visibility.len() != n {
            return Err(TrackError::Shape(format!(
                "expected {} observations, got {} positions and {} visibility flags",
                n,
                self.positions.len(),
                self.visibility.len()
            )));
        }
        let mut ids = self.point_ids.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(TrackError::Shape("duplicate point id".into()));
        }
        for t in 0..self.num_frames {
            for i in 0..self.num_points() {
                let p = self.position(t, i);
                if self.visible(t, i) && !(p.x.is_finite() && p.y.is_finite()) {
                    return Err(TrackError::NonFinite { point_id: self.point_ids[i], frame: t });
                }
            }
        }
        if let Some(levels) = &self.gt_levels {
            if levels.len() != n {
                return Err(TrackError::Shape("gt_levels length".into()));
            }
        }
        if let Some(l) = &self.logits {
            if l.n_levels == 0 || l.values.len() != n * l.n_levels {
                return Err(TrackError::Shape("logits length".into()));
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_points(&self) -> usize {
        self.point_ids.len()
    }

    pub fn point_ids(&self) -> &[u32] {
        &self.point_ids
    }

    fn idx(&self, frame: usize, point: usize) -> usize {
        frame * self.point_ids.len() + point
    }

    pub fn position(&self, frame: usize, point: usize) -> Pixel {
        self.positions[self.idx(frame, point)]
    }

    pub fn visible(&self, frame: usize, point: usize) -> bool {
        self.visibility[self.idx(frame, point)]
    }

    pub fn set_position(&mut self, frame: usize, point: usize, p: Pixel) {
        let i = self.idx(frame, point);
        self.positions[i] = p;
    }

    pub fn set_visible(&mut self, frame: usize, point: usize, v: bool) {
        let i = self.idx(frame, point);
        self.visibility[i] = v;
    }

    pub fn positions(&self) -> &[Pixel] {
        &self.positions
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visibility
    }

    pub fn gt_levels(&self) -> Option<&[u8]> {
        self.gt_levels.as_deref()
    }

    pub fn gt_level(&self, frame: usize, point: usize) -> Option<u8> {
        self.gt_levels.as_ref().map(|l| l[self.idx(frame, point)])
    }

    pub fn set_gt_levels(&mut self, levels: Option<Vec<u8>>) -> Result<(), TrackError> {
        if let Some(l) = &levels {
            if l.len() != self.positions.len() {
                return Err(TrackError::Shape("gt_levels length".into()));
            }
        }
        self.gt_levels = levels;
        Ok(())
    }

    pub fn logits(&self) -> Option<&Logits> {
        self.logits.as_ref()
    }

    /// Logit vector of one observation.
    pub fn logit(&self, frame: usize, point: usize) -> Option<&[f64]> {
        let i = self.idx(frame, point);
        self.logits.as_ref().map(|l| &l.values[i * l.n_levels..(i + 1) * l.n_levels])
    }

    pub fn set_logits(&mut self, logits: Option<Logits>) -> Result<(), TrackError> {
        if let Some(l) = &logits {
            if l.n_levels == 0 || l.values.len() != self.positions.len() * l.n_levels {
                return Err(TrackError::Shape("logits length".into()));
            }
        }
        self.logits = logits;
        Ok(())
    }

    /// Number of visible observations in `frame`.
    pub fn visible_count(&self, frame: usize) -> usize {
        (0..self.num_points()).filter(|&i| self.visible(frame, i)).count()
    }

    pub fn index_of(&self, point_id: u32) -> Option<usize> {
        self.point_ids.iter().position(|&p| p == point_id)
    }

    /// Exact equality that treats NaN positions as equal to each other.
    pub fn bitwise_eq(&self, other: &TrackSet) -> bool {
        self.num_frames == other.num_frames
            && self.point_ids == other.point_ids
            && self.visibility == other.visibility
            && self.gt_levels == other.gt_levels
            && self.logits == other.logits
            && self.positions.len() == other.positions.len()
            && self
                .positions
                .iter()
                .zip(&other.positions)
                .all(|(a, b)| a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_validation() {
        assert!(matches!(
            TrackSet::new(1, vec![0], vec![Pixel::zeros()], vec![true]),
            Err(TrackError::TooFewFrames(1))
        ));
        assert!(TrackSet::new(2, vec![0], vec![Pixel::zeros()], vec![true]).is_err());
        assert!(TrackSet::new(2, vec![3, 3], vec![Pixel::zeros(); 4], vec![true; 4]).is_err());
        let nan = Pixel::new(f64::NAN, 0.0);
        assert!(TrackSet::new(2, vec![0], vec![nan, Pixel::zeros()], vec![false, true]).is_ok());
        assert!(matches!(
            TrackSet::new(2, vec![0], vec![nan, Pixel::zeros()], vec![true, true]),
            Err(TrackError::NonFinite { .. })
        ));
    }

    #[test]
    fn frame_major_indexing() {
        let pos = (0..6).map(|i| Pixel::new(i as f64, 0.0)).collect();
        let ts = TrackSet::new(2, vec![10, 11, 12], pos, vec![true; 6]).unwrap();
        assert_eq!(ts.position(1, 0).x, 3.0);
        assert_eq!(ts.position(0, 2).x, 2.0);
        assert_eq!(ts.index_of(12), Some(2));
    }
}
