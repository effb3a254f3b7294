//! Synthetic benchmark and geometric estimation engine for short-window
//! monocular object pose tracking.
//!
//! The pipeline: generate a camera/object trajectory ([`trajgen`]), synthesize
//! ground-truth keypoint tracks with co-visibility ([`scene`]), corrupt them
//! with a level-calibrated tracker model ([`trackersim`]), select reliable
//! keypoints from uncertainty logits ([`uncertainty`]), recover per-window
//! poses with structure from motion ([`sfm`]) and score against ground truth
//! ([`metrics`]).

pub mod bench;
pub mod geometry;
pub mod io;
pub mod keyframe;
pub mod metrics;
pub mod rng;
pub mod scene;
pub mod sfm;
pub mod trackersim;
pub mod tracks;
pub mod trajgen;
pub mod uncertainty;

pub use geometry::{CameraIntrinsics, GeometryError, Pixel, Point3, Pose, SimilarityTransform, Vec3};
pub use tracks::TrackSet;
pub use trajgen::{Trajectory, TrajectoryParams};
