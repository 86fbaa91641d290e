//! Seeded random streams.
//!
//! Every source of randomness in a training run is drawn from its own ChaCha
//! stream derived from the run seed, so that changing how one stage consumes
//! randomness never perturbs another (the batch schedule in particular).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub type RunRng = ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Preprocess = 1,
    Batch = 2,
    Records = 3,
    Noise = 4,
    Filter = 5,
    Probe = 6,
}

pub fn stream(seed: u64, which: Stream) -> RunRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// A seed for a component that takes a plain `u64`.
pub fn derived_seed(seed: u64, which: Stream) -> u64 {
    stream(seed, which).next_u64()
}

/// Laplace(0, scale) by inversion.
pub fn laplace<R: rand::Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.sample::<f64, _>(rand::distr::Open01) - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}
