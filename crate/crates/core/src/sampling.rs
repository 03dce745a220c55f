//! Reverse-process simulation with an exponential-integrator predictor and
//! Langevin corrector steps.
//!
//! The time grid is `t_i = i/N` for `i = N, …, 0`. Each predictor step moves
//! from `t_i` to `t_{i−1}` and is followed by `C` corrector steps at
//! `t_{i−1}`. No corrector runs at `t = 0`, where the noise-predicting score
//! is undefined.

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{check_len, Error, Result};
use crate::rng::{self, Rng};
use crate::score::ScoreFn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub corrections: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 256,
            corrections: 1,
            tau: 0.25,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("the sampler needs at least one step".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }
}

/// One exponential-integrator step from `t` down to `t_prev`.
pub fn ei_predictor_step(
    schedule: &DiffusionSchedule,
    x_t: &[f64],
    t: f64,
    t_prev: f64,
    score: &[f64],
) -> Result<Vec<f64>> {
    check_len(x_t.len(), score.len())?;
    if t_prev > t {
        return Err(Error::InvalidConfig(format!(
            "predictor must move backward in time, got {t} → {t_prev}"
        )));
    }
    if t_prev == t {
        return Ok(x_t.to_vec());
    }
    let (mu, sigma) = schedule.coefficients(t)?;
    let (mu_p, sigma_p) = schedule.coefficients(t_prev)?;
    if sigma == 0.0 {
        return Err(Error::TimeOutOfRange(t));
    }
    let ratio = mu_p / mu;
    let coef = (ratio - sigma_p / sigma) * sigma * sigma;
    Ok(x_t.iter().zip(score).map(|(x, s)| ratio * x + coef * s).collect())
}

/// `δ = τ·dim(s)/‖s‖²`, or `None` when the score vanishes.
pub fn langevin_step_size(score: &[f64], tau: f64) -> Option<f64> {
    let norm2: f64 = score.iter().map(|s| s * s).sum();
    (norm2 > 0.0 && norm2.is_finite()).then(|| tau * score.len() as f64 / norm2)
}

/// One Langevin move `x + δ·s + √(2δ)·ε` on a single sample, in place.
///
/// Returns the step size used, or `None` when `‖s‖ = 0` and `x` is left untouched.
pub fn lmc_update(x: &mut [f64], score: &[f64], tau: f64, rng: &mut Rng) -> Result<Option<f64>> {
    check_len(x.len(), score.len())?;
    let Some(delta) = langevin_step_size(score, tau) else {
        return Ok(None);
    };
    let noise = rng::normal_vec(rng, x.len());
    let scale = (2.0 * delta).sqrt();
    for ((x, s), e) in x.iter_mut().zip(score).zip(noise) {
        *x += delta * s + scale * e;
    }
    Ok(Some(delta))
}

/// One corrector step on a batch of samples of size `sample_len`, each with its own stream.
pub fn lmc_corrector_step<S: ScoreFn + ?Sized>(
    x_t: &[f64],
    sample_len: usize,
    t: f64,
    score_fn: &S,
    tau: f64,
    rngs: &mut [Rng],
) -> Result<Vec<f64>> {
    if sample_len == 0 || x_t.len() != sample_len * rngs.len() {
        return Err(Error::ShapeMismatch {
            expected: sample_len * rngs.len(),
            got: x_t.len(),
        });
    }
    let score = score_fn.score(x_t, t)?;
    check_len(x_t.len(), score.len())?;
    let mut out = x_t.to_vec();
    for ((x, s), r) in out
        .chunks_mut(sample_len)
        .zip(score.chunks(sample_len))
        .zip(rngs.iter_mut())
    {
        lmc_update(x, s, tau, r)?;
    }
    Ok(out)
}

fn ensure_finite(x: &[f64], step: usize, t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { step, t })
    }
}

/// Draws `n` samples of `sample_len` values each by simulating the reverse process.
///
/// Sample `j` draws all of its noise from stream `j` of the seed, so results do not
/// depend on how many samples share a call.
pub fn sample<S: ScoreFn + ?Sized>(
    score_fn: &S,
    config: &SamplerConfig,
    n: usize,
    sample_len: usize,
) -> Result<Vec<f64>> {
    sample_from(score_fn, config, n, sample_len, 0)
}

/// Like [`sample`], with sample indices starting at `first`.
pub fn sample_from<S: ScoreFn + ?Sized>(
    score_fn: &S,
    config: &SamplerConfig,
    n: usize,
    sample_len: usize,
    first: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    if n == 0 || sample_len == 0 {
        return Err(Error::InvalidConfig("nothing to sample".into()));
    }
    let schedule = DiffusionSchedule::vp_cosine();
    let mut rngs: Vec<Rng> = (0..n as u64).map(|j| rng::stream(config.seed, first + j)).collect();
    let sigma1 = schedule.sigma(1.0)?;
    let mut x = Vec::with_capacity(n * sample_len);
    for r in rngs.iter_mut() {
        x.extend(rng::normal_vec(r, sample_len).into_iter().map(|e| sigma1 * e));
    }
    for i in (1..=config.steps).rev() {
        let step = config.steps - i;
        let (t, t_prev) = (config.time(i), config.time(i - 1));
        let s = score_fn.score(&x, t)?;
        check_len(x.len(), s.len())?;
        x = ei_predictor_step(&schedule, &x, t, t_prev, &s)?;
        ensure_finite(&x, step, t_prev)?;
        if t_prev > 0.0 {
            for _ in 0..config.corrections {
                x = lmc_corrector_step(&x, sample_len, t_prev, score_fn, config.tau, &mut rngs)?;
                ensure_finite(&x, step, t_prev)?;
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::GaussianScore;

    fn moments(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn predictor_reductions() {
        let s = DiffusionSchedule::vp_cosine();
        let x = [1.5, -0.5];
        let y = ei_predictor_step(&s, &x, 0.7, 0.6, &[0.0, 0.0]).unwrap();
        let r = s.mu(0.6).unwrap() / s.mu(0.7).unwrap();
        assert!((y[0] - r * 1.5).abs() < 1e-15);
        assert_eq!(ei_predictor_step(&s, &x, 0.7, 0.7, &[3.0, 3.0]).unwrap(), x.to_vec());
        assert!(ei_predictor_step(&s, &x, 0.0, 0.0, &[0.0, 0.0]).is_ok());
        assert!(ei_predictor_step(&s, &x, 0.5, 0.6, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn predictor_preserves_unit_variance() {
        let s = DiffusionSchedule::vp_cosine();
        let mut r = rng::stream(3, 0);
        let x = rng::normal_vec(&mut r, 100_000);
        let score: Vec<f64> = x.iter().map(|v| -v).collect();
        let y = ei_predictor_step(&s, &x, 0.5, 0.45, &score).unwrap();
        let (_, var) = moments(&y);
        // variance of a sample variance of 1e5 normals has SE √(2/n)
        assert!((var - 1.0).abs() < 3.0 * (2.0f64 / 1e5).sqrt() * 1.2, "{var}");
    }

    #[test]
    fn step_size_formula_and_zero_score() {
        assert_eq!(langevin_step_size(&[1.0, -1.0], 0.3), Some(0.3));
        assert_eq!(langevin_step_size(&[0.0, 0.0], 0.3), None);
        let mut r = rng::stream(0, 0);
        let mut x = vec![2.0, 3.0];
        assert_eq!(lmc_update(&mut x, &[0.0, 0.0], 0.5, &mut r).unwrap(), None);
        assert_eq!(x, vec![2.0, 3.0]);
    }

    #[test]
    fn langevin_on_standard_normal_reaches_discretized_stationary_law() {
        // the ensemble is one 10⁴-dimensional sample, so δ is shared by every chain
        let tau = 0.25;
        let chains = 10_000;
        let mut x = vec![5.0; chains];
        let mut rngs = vec![rng::stream(11, 0)];
        let target = GaussianScore::standard(chains);
        for _ in 0..100 {
            x = lmc_corrector_step(&x, chains, 0.0, &target, tau, &mut rngs).unwrap();
        }
        let delta = langevin_step_size(&target.score(&x, 0.0).unwrap(), tau).unwrap();
        let expected = 2.0 * delta / (1.0 - (1.0 - delta).powi(2));
        let (m, v) = moments(&x);
        let se = expected * (2.0 / chains as f64).sqrt();
        assert!(m.abs() < 0.05, "{m}");
        assert!((v - expected).abs() < 3.0 * se, "{v} vs {expected}");
        // fixed point of the global rule: variance 1 + τ/2
        assert!((v - (1.0 + tau / 2.0)).abs() < 3.0 * se, "{v}");
    }

    #[test]
    fn langevin_fixed_step_matches_ou_stationary_variance() {
        // with a fixed δ the chain x' = (1−δ)x + √(2δ)ε has variance 2δ/(1−(1−δ)²)
        let delta: f64 = 0.25;
        let expected = 2.0 * delta / (1.0 - (1.0 - delta).powi(2));
        let mut r = rng::stream(5, 0);
        let chains = 10_000;
        let mut x = vec![5.0; chains];
        for _ in 0..100 {
            for v in x.iter_mut() {
                let e = rng::normal_vec(&mut r, 1)[0];
                *v = *v - delta * *v + (2.0 * delta).sqrt() * e;
            }
        }
        let (m, v) = moments(&x);
        let se = expected * (2.0 / chains as f64).sqrt();
        assert!(m.abs() < 0.05);
        assert!((v - expected).abs() < 3.0 * se, "{v} vs {expected}");
    }

    #[test]
    fn exact_scalar_score_recovers_standard_normal() {
        let cfg = SamplerConfig { steps: 256, corrections: 0, tau: 0.25, seed: 1 };
        let x = sample(&GaussianScore::standard(1), &cfg, 10_000, 1).unwrap();
        let (m, v) = moments(&x);
        assert!(m.abs() < 0.04, "{m}");
        assert!((0.94..1.06).contains(&v), "{v}");
    }

    #[test]
    fn exact_score_recovers_shifted_mean_in_3d() {
        let mean = vec![1.0, -2.0, 0.5];
        let target = GaussianScore::diagonal(mean.clone(), vec![1.0; 3]).unwrap();
        let cfg = SamplerConfig { steps: 128, corrections: 1, tau: 0.25, seed: 2 };
        let n = 4000;
        let x = sample(&target, &cfg, n, 3).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = x.chunks(3).map(|s| s[c]).collect();
            let (m, v) = moments(&col);
            assert!((m - mean[c]).abs() < 3.0 * (v / n as f64).sqrt(), "{c}: {m}");
        }
    }

    #[test]
    fn deterministic_and_batch_independent() {
        let cfg = SamplerConfig { steps: 16, corrections: 1, tau: 0.5, seed: 9 };
        let t = GaussianScore::standard(2);
        let a = sample(&t, &cfg, 6, 2).unwrap();
        let b = sample(&t, &cfg, 6, 2).unwrap();
        assert_eq!(a, b);
        let tail = sample_from(&t, &cfg, 2, 2, 4).unwrap();
        assert_eq!(&a[8..], &tail[..]);
    }

    struct Exploding;
    impl ScoreFn for Exploding {
        fn score(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(x.iter().map(|_| f64::INFINITY).collect())
        }
    }

    #[test]
    fn non_finite_state_reports_step() {
        let cfg = SamplerConfig { steps: 8, corrections: 0, tau: 0.5, seed: 0 };
        match sample(&Exploding, &cfg, 2, 2) {
            Err(Error::NonFiniteState { step, .. }) => assert_eq!(step, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_configs() {
        let t = GaussianScore::standard(1);
        assert!(sample(&t, &SamplerConfig { steps: 0, ..Default::default() }, 1, 1).is_err());
        assert!(sample(&t, &SamplerConfig { tau: 0.0, ..Default::default() }, 1, 1).is_err());
    }
}
