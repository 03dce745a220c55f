//! Seeded random streams.
//!
//! Every stochastic routine derives its randomness from a `(seed, stream)`
//! pair, so work split across threads stays reproducible regardless of how
//! many workers run it.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn fill_normal(rng: &mut Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_normal(rng, &mut v);
    v
}

/// An independent seed for a named sub-task of a run seeded with `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    stream(seed, tag).next_u64()
}
