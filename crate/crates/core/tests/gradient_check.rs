//! Central finite differences against reverse-mode gradients of the denoising loss.

use rand::Rng;
use sda_core::rng::{normal_vec, stream};
use sda_core::{DiffusionSchedule, NetworkConfig, Parameters};

const TRIPLES: u64 = 100;
const STEP: f64 = 1e-5;

fn config(seed: u64) -> NetworkConfig {
    NetworkConfig {
        window_radius: 1,
        state_dim: 2,
        hidden_features: 6,
        residual_blocks: 2,
        time_embedding_dim: 4,
        seed,
    }
}

/// Random parameters that are not at initialization, so that every layer
/// (including the zero-initialized output) carries gradient signal.
fn random_params(seed: u64) -> Parameters {
    let cfg = config(seed);
    let init = Parameters::new(cfg.clone()).unwrap();
    let mut r = stream(seed, 1);
    let values = init
        .values()
        .iter()
        .zip(normal_vec(&mut r, init.len()))
        .map(|(v, n)| v + 0.3 * n)
        .collect();
    Parameters::from_values(cfg, values).unwrap()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let schedule = DiffusionSchedule::vp_cosine();
    let mut checked = 0usize;
    for triple in 0..TRIPLES {
        let params = random_params(triple);
        let size = params.config().window_size();
        let mut r = stream(triple, 2);
        let clean = normal_vec(&mut r, size);
        let eps = normal_vec(&mut r, size);
        let t = r.random_range(0.02..0.98);
        let (_, grad) = params.dsm_loss_and_grad(&schedule, &clean, &[t], &eps).unwrap();

        let mut values = params.values().to_vec();
        for p in 0..values.len() {
            let orig = values[p];
            let mut loss_at = |v: f64| {
                values[p] = v;
                let shifted = Parameters::from_values(params.config().clone(), values.clone()).unwrap();
                shifted.dsm_loss_and_grad(&schedule, &clean, &[t], &eps).unwrap().0
            };
            let fd = (loss_at(orig + STEP) - loss_at(orig - STEP)) / (2.0 * STEP);
            values[p] = orig;
            let scale = fd.abs().max(grad[p].abs());
            assert!(
                (fd - grad[p]).abs() <= 1e-4 * scale + 1e-6,
                "triple {triple}, parameter {p}: analytic {} vs numeric {fd}",
                grad[p]
            );
            checked += 1;
        }
    }
    assert!(checked >= 100);
}

#[test]
fn input_vjp_matches_finite_differences() {
    for seed in 0..20 {
        let params = random_params(100 + seed);
        let size = params.config().window_size();
        let mut r = stream(seed, 3);
        let x = normal_vec(&mut r, size);
        let cot = normal_vec(&mut r, size);
        let t = r.random_range(0.05..0.95);
        let g = params.eps_vjp(&x, &[t], &cot).unwrap();
        for i in 0..size {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += STEP;
            lo[i] -= STEP;
            let f = |w: &[f64]| -> f64 {
                let e = params.eps_eval(w, t).unwrap();
                e.iter().zip(&cot).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&hi) - f(&lo)) / (2.0 * STEP);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()) + 1e-6);
        }
    }
}
