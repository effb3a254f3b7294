//! Seeded, portable random streams.
//!
//! Every stochastic stage draws from ChaCha8 seeded with the user seed and a
//! fixed per-stage stream id, so runs are reproducible across platforms and
//! independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids for the pipeline stages.
pub mod stream {
    pub const TRAJECTORY: u64 = 1;
    pub const SUBSAMPLE: u64 = 2;
    pub const OCCLUSION: u64 = 3;
    pub const CORRUPTION: u64 = 4;
    pub const LOGITS: u64 = 5;
    pub const RANSAC: u64 = 6;
    pub const GRID: u64 = 7;
    pub const CROP: u64 = 8;
    pub const MODEL: u64 = 9;
    pub const KEYFRAME: u64 = 10;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniformly distributed unit vector.
pub fn unit_vector<R: rand::Rng + ?Sized>(rng: &mut R) -> nalgebra::Vector3<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v =
            nalgebra::Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}
