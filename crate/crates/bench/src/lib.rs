//! Shared fixtures for the benchmarks.

use sda_core::rng::{normal_vec, stream};
use sda_core::{NetworkConfig, Parameters};

/// A network of the desk-scale shape with non-trivial weights.
pub fn network(k: usize, hidden: usize) -> Parameters {
    let cfg = NetworkConfig {
        window_radius: k,
        state_dim: 3,
        hidden_features: hidden,
        residual_blocks: 3,
        time_embedding_dim: 16,
        seed: 0,
    };
    let init = Parameters::new(cfg.clone()).expect("valid network");
    let noise = normal_vec(&mut stream(1, 0), init.len());
    let values = init.values().iter().zip(noise).map(|(v, n)| v + 0.01 * n).collect();
    Parameters::from_values(cfg, values).expect("same layout")
}

/// `n` standard normal vectors of length `size`, flattened.
pub fn gaussian_batch(n: usize, size: usize, seed: u64) -> Vec<f64> {
    normal_vec(&mut stream(seed, 0), n * size)
}
