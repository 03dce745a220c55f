//! Likelihood scores on a one-dimensional linear Gaussian problem where the
//! perturbed likelihood is known in closed form.
//!
//! Prior `x ~ N(0, 1)`, observation `y = x + η` with `η ~ N(0, r²)`. Under the
//! variance-preserving schedule `x(t) | x ~ N(μx, σ²)` and `x | x(t) ~ N(μ x(t), σ²)`,
//! so `∇ log p(y | x(t)) = μ (y − μ x(t)) / (σ² + r²)`.

use sda_core::guidance::{dps_likelihood_score, sda_likelihood_score};
use sda_core::{
    DiffusionSchedule, GammaMatrix, GaussianScore, LikelihoodCovariance, ObservationOperator,
    ObservationProcess,
};

const R2: f64 = 0.25;
const GAMMA: f64 = 0.5;

/// Twice the reference relative error of the SDA score, `t = 0.1 ..= 0.9`.
const SDA_TOLERANCE: [f64; 9] = [
    2.0 * 8.053696e-02,
    2.0 * 1.936803e-01,
    2.0 * 1.500563e-01,
    2.0 * 7.972370e-02,
    2.0 * 3.960846e-01,
    2.0 * 6.834470e-01,
    2.0 * 8.761701e-01,
    2.0 * 9.693807e-01,
    2.0 * 9.971053e-01,
];

const DPS_REFERENCE: [f64; 9] = [
    1.858215e-01, 7.007337e-01, 1.430291, 2.223165, 2.935754, 3.471045, 3.798756, 3.950827, 3.995367,
];

fn problem(y: f64) -> ObservationProcess {
    ObservationProcess::new(ObservationOperator::Identity, 1, 1, vec![R2], vec![y]).unwrap()
}

fn exact(x: f64, y: f64, t: f64) -> f64 {
    let (mu, sigma) = DiffusionSchedule::vp_cosine().coefficients(t).unwrap();
    mu * (y - mu * x) / (sigma * sigma + R2)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

const POINTS: [(f64, f64); 4] = [(0.3, 1.1), (-1.4, 0.2), (2.0, -0.7), (0.05, 0.9)];

#[test]
fn sda_score_is_within_frozen_tolerance() {
    let prior = GaussianScore::standard(1);
    for (i, tol) in SDA_TOLERANCE.iter().enumerate() {
        let t = (i + 1) as f64 / 10.0;
        for (x, y) in POINTS {
            let s = sda_likelihood_score(&[x], t, &problem(y), &prior, LikelihoodCovariance::Surrogate(GAMMA))
                .unwrap()[0];
            let err = rel(s, exact(x, y, t));
            assert!(err <= *tol, "t = {t}, x = {x}: {err} > {tol}");
            assert!((err - tol / 2.0).abs() < 1e-6 * tol, "t = {t}: {err} vs {}", tol / 2.0);
        }
    }
}

#[test]
fn sda_error_never_exceeds_dps_error() {
    let prior = GaussianScore::standard(1);
    for (i, dps_ref) in DPS_REFERENCE.iter().enumerate() {
        let t = (i + 1) as f64 / 10.0;
        for (x, y) in POINTS {
            let e = exact(x, y, t);
            let sda = sda_likelihood_score(&[x], t, &problem(y), &prior, LikelihoodCovariance::Surrogate(GAMMA))
                .unwrap()[0];
            let dps = dps_likelihood_score(&[x], t, &problem(y), &prior).unwrap()[0];
            assert!(rel(sda, e) <= rel(dps, e), "t = {t}");
            assert!((rel(dps, e) - dps_ref).abs() < 1e-6 * dps_ref);
        }
    }
}

#[test]
fn projected_scalar_gamma_agrees_with_surrogate_under_identity() {
    let prior = GaussianScore::standard(1);
    for i in 1..10 {
        let t = i as f64 / 10.0;
        let obs = problem(0.4);
        let a = sda_likelihood_score(&[0.7], t, &obs, &prior, LikelihoodCovariance::Surrogate(GAMMA)).unwrap();
        let b = sda_likelihood_score(
            &[0.7],
            t,
            &obs,
            &prior,
            LikelihoodCovariance::Projected(GammaMatrix::Scalar(GAMMA)),
        )
        .unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 * a[0].abs().max(1.0));
    }
}

#[test]
fn both_variants_are_exact_without_noise() {
    let prior = GaussianScore::standard(1);
    let e = exact(0.2, 0.9, 0.0);
    let sda = sda_likelihood_score(&[0.2], 0.0, &problem(0.9), &prior, LikelihoodCovariance::Surrogate(GAMMA))
        .unwrap()[0];
    let dps = dps_likelihood_score(&[0.2], 0.0, &problem(0.9), &prior).unwrap()[0];
    assert!(rel(sda, e) < 1e-12 && rel(dps, e) < 1e-12);
}
