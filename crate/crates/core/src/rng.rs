//! Seeded random streams.
//!
//! Each trial derives its generator from `seed ^ trial`, and each kind of
//! draw (phantom, motion, noise, ...) gets its own ChaCha stream so changing
//! one does not shift the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Phantom = 1,
    Motion = 2,
    Noise = 3,
    Coils = 4,
    Probe = 5,
}

pub fn stream(seed: u64, trial: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ trial);
    rng.set_stream(purpose as u64);
    rng
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
