//! Analytic AR(1) Gaussian chains: a Markov chain whose perturbed marginals,
//! window marginals and conditionals are all available in closed form.
//!
//! `x₁ ~ N(0, p0)`, `x_{j+1} = a·x_j + N(0, q)`, independently per channel.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::composition::LocalScore;
use crate::diffusion::DiffusionSchedule;
use crate::error::{check_len, Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianChainSpec {
    pub len: usize,
    pub dim: usize,
    pub a: f64,
    pub q: f64,
    pub p0: f64,
}

impl GaussianChainSpec {
    pub fn new(len: usize, dim: usize, a: f64, q: f64, p0: f64) -> Result<Self> {
        let spec = Self { len, dim, a, q, p0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig("chain length and dimension must be positive".into()));
        }
        if !(self.q > 0.0 && self.p0 > 0.0) {
            return Err(Error::InvalidConfig("chain variances must be positive".into()));
        }
        if !(self.a.abs() <= 2.0) {
            return Err(Error::InvalidConfig("|a| must not exceed 2".into()));
        }
        Ok(())
    }

    /// Marginal variances `v_j` of the clean chain.
    pub fn variances(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len);
        let mut cur = self.p0;
        for _ in 0..self.len {
            v.push(cur);
            cur = self.a * self.a * cur + self.q;
        }
        v
    }

    /// `Cov(x_i, x_j) = a^{|i−j|}·v_{min(i,j)}`, one channel.
    pub fn covariance(&self) -> DMatrix<f64> {
        let v = self.variances();
        DMatrix::from_fn(self.len, self.len, |i, j| {
            let (lo, hi) = (i.min(j), i.max(j));
            self.a.powi((hi - lo) as i32) * v[lo]
        })
    }

    /// `μ(t)²·Σ + σ(t)²·I` restricted to `window`.
    pub fn perturbed_covariance(&self, t: f64, window: Range<usize>) -> Result<DMatrix<f64>> {
        if window.end > self.len || window.start >= window.end {
            return Err(Error::InvalidConfig(format!(
                "window {window:?} is not inside a chain of length {}",
                self.len
            )));
        }
        let (mu, sigma) = DiffusionSchedule::vp_cosine().coefficients(t)?;
        let full = self.covariance();
        let n = window.len();
        Ok(DMatrix::from_fn(n, n, |i, j| {
            let c = mu * mu * full[(window.start + i, window.start + j)];
            if i == j {
                c + sigma * sigma
            } else {
                c
            }
        }))
    }
}

/// Exact score of the perturbed window marginal, evaluated at the window rows of `x_t`.
///
/// `x_t` holds the whole chain (`len × dim`); the result holds `window.len() × dim` values.
pub fn gaussian_chain_score(
    spec: &GaussianChainSpec,
    x_t: &[f64],
    t: f64,
    window: Option<Range<usize>>,
) -> Result<Vec<f64>> {
    check_len(spec.len * spec.dim, x_t.len())?;
    let window = window.unwrap_or(0..spec.len);
    let cov = spec.perturbed_covariance(t, window.clone())?;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("perturbed chain covariance".into()))?;
    let d = spec.dim;
    let n = window.len();
    let mut out = vec![0.0; n * d];
    for c in 0..d {
        let xw = DVector::from_fn(n, |i, _| x_t[(window.start + i) * d + c]);
        let s = chol.solve(&xw);
        for i in 0..n {
            out[i * d + c] = -s[i];
        }
    }
    Ok(out)
}

/// Analytic local scores of the chain, for exact composition experiments.
pub struct ChainLocalScore {
    pub spec: GaussianChainSpec,
    pub radius: usize,
}

impl ChainLocalScore {
    fn precision(&self, start: usize, t: f64) -> Result<DMatrix<f64>> {
        let cov = self
            .spec
            .perturbed_covariance(t, start..start + 2 * self.radius + 1)?;
        cov.try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("window covariance".into()))
    }

    fn apply(&self, values: &[f64], starts: &[usize], t: f64) -> Result<Vec<f64>> {
        let w = 2 * self.radius + 1;
        let d = self.spec.dim;
        check_len(starts.len() * w * d, values.len())?;
        let mut out = vec![0.0; values.len()];
        let mut cache: Option<(usize, DMatrix<f64>)> = None;
        for (k, &start) in starts.iter().enumerate() {
            if cache.as_ref().is_none_or(|(s, _)| *s != start) {
                cache = Some((start, self.precision(start, t)?));
            }
            let p = &cache.as_ref().expect("just filled").1;
            let block = &values[k * w * d..(k + 1) * w * d];
            for c in 0..d {
                for i in 0..w {
                    let mut acc = 0.0;
                    for j in 0..w {
                        acc += p[(i, j)] * block[j * d + c];
                    }
                    out[k * w * d + i * d + c] = -acc;
                }
            }
        }
        Ok(out)
    }
}

impl LocalScore for ChainLocalScore {
    fn radius(&self) -> usize {
        self.radius
    }

    fn state_dim(&self) -> usize {
        self.spec.dim
    }

    fn window_scores(&self, windows: &[f64], starts: &[usize], t: f64) -> Result<Vec<f64>> {
        self.apply(windows, starts, t)
    }

    fn window_vjp(
        &self,
        _windows: &[f64],
        starts: &[usize],
        t: f64,
        cotangent: &[f64],
    ) -> Result<Vec<f64>> {
        // the window precision is symmetric
        self.apply(cotangent, starts, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnbiasednessGap {
    pub gap: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of `|E[full score row i | x_window] − windowed score row i|`.
///
/// A window state `x_W(t)` is drawn from its perturbed marginal; the states
/// outside the window are then drawn `n_samples` times from their exact
/// conditional, and the full-chain score of row `i` is averaged over them.
pub fn mc_unbiasedness_check(
    spec: &GaussianChainSpec,
    i: usize,
    window: Range<usize>,
    t: f64,
    n_samples: usize,
    seed: u64,
) -> Result<UnbiasednessGap> {
    if n_samples < 2 {
        return Err(Error::InvalidConfig("need at least two Monte Carlo samples".into()));
    }
    if spec.dim != 1 {
        return Err(Error::InvalidConfig("the unbiasedness check works on scalar chains".into()));
    }
    if !window.contains(&i) || window.end > spec.len {
        return Err(Error::InvalidConfig(format!(
            "window {window:?} must contain {i} and lie inside the chain"
        )));
    }
    let full = spec.perturbed_covariance(t, 0..spec.len)?;
    let inside: Vec<usize> = window.clone().collect();
    let outside: Vec<usize> = (0..spec.len).filter(|j| !window.contains(j)).collect();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| full[(rows[r], cols[c])])
    };
    let s_ww = pick(&inside, &inside);
    let chol_ww = s_ww
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("window covariance".into()))?;

    let mut rng = rng::stream(seed, 0);
    let z = DVector::from_vec(rng::normal_vec(&mut rng, inside.len()));
    let x_w = chol_ww.l() * z;
    let windowed = -chol_ww.solve(&x_w)[i - window.start];

    if outside.is_empty() {
        return Ok(UnbiasednessGap { gap: 0.0, stderr: 0.0 });
    }

    let s_cw = pick(&outside, &inside);
    let s_cc = pick(&outside, &outside);
    let gain = chol_ww.solve(&s_cw.transpose()).transpose();
    let cond_mean = &gain * &x_w;
    let cond_cov = &s_cc - &gain * s_cw.transpose();
    let cond_cov = (&cond_cov + cond_cov.transpose()) * 0.5;
    let cond_l = cond_cov
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("conditional covariance".into()))?
        .l();

    let precision = full
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("chain covariance".into()))?;
    let row = precision.row(i);
    let base: f64 = inside.iter().enumerate().map(|(k, &j)| row[j] * x_w[k]).sum();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut z = DVector::zeros(outside.len());
    for _ in 0..n_samples {
        rng::fill_normal(&mut rng, z.as_mut_slice());
        let x_c = &cond_mean + &cond_l * &z;
        let tail: f64 = outside.iter().enumerate().map(|(k, &j)| row[j] * x_c[k]).sum();
        let full_score = -(base + tail);
        sum += full_score;
        sum_sq += full_score * full_score;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean) / (n - 1.0);
    Ok(UnbiasednessGap {
        gap: (mean - windowed).abs(),
        stderr: (var.max(0.0) / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ar1(len: usize) -> GaussianChainSpec {
        GaussianChainSpec::new(len, 1, 0.9, 0.1, 1.0).unwrap()
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(GaussianChainSpec::new(4, 1, 0.5, 0.0, 1.0).is_err());
        assert!(GaussianChainSpec::new(4, 1, 0.5, 1.0, -1.0).is_err());
        assert!(GaussianChainSpec::new(4, 1, 2.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn pure_noise_limit() {
        let spec = ar1(6);
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let s = gaussian_chain_score(&spec, &x, 1.0, None).unwrap();
        for (si, xi) in s.iter().zip(&x) {
            assert!((si + xi).abs() <= 1e-3 * xi.abs().max(1e-12));
        }
    }

    #[test]
    fn independent_states_have_diagonal_score() {
        let spec = GaussianChainSpec::new(5, 2, 0.0, 0.7, 0.7).unwrap();
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).cos()).collect();
        let (mu, sigma) = DiffusionSchedule::vp_cosine().coefficients(0.35).unwrap();
        let s = gaussian_chain_score(&spec, &x, 0.35, Some(1..4)).unwrap();
        for (k, si) in s.iter().enumerate() {
            let xi = x[2 + k];
            assert!((si + xi / (mu * mu * 0.7 + sigma * sigma)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_finite_difference_of_log_density() {
        let spec = ar1(3);
        let t = 0.4;
        let x = [0.3, -0.8, 1.1];
        let cov = spec.perturbed_covariance(t, 0..3).unwrap();
        let prec = cov.try_inverse().unwrap();
        let logpdf = |x: &[f64]| {
            let v = DVector::from_column_slice(x);
            -0.5 * (v.transpose() * &prec * &v)[(0, 0)]
        };
        let s = gaussian_chain_score(&spec, &x, t, None).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let mut up = x;
            up[i] += h;
            let mut down = x;
            down[i] -= h;
            let fd = (logpdf(&up) - logpdf(&down)) / (2.0 * h);
            assert!((fd - s[i]).abs() < 1e-8, "{fd} vs {}", s[i]);
        }
    }

    #[test]
    fn full_window_has_no_gap() {
        let g = mc_unbiasedness_check(&ar1(8), 3, 0..8, 0.5, 10, 1).unwrap();
        assert_eq!(g.gap, 0.0);
    }

    #[test]
    fn unbiasedness_input_errors() {
        let spec = ar1(8);
        assert!(mc_unbiasedness_check(&spec, 3, 1..6, 0.5, 1, 0).is_err());
        assert!(mc_unbiasedness_check(&spec, 7, 1..6, 0.5, 10, 0).is_err());
    }

    #[test]
    fn gap_vanishes_near_pure_noise() {
        let g = mc_unbiasedness_check(&ar1(8), 3, 1..6, 1.0, 1000, 5).unwrap();
        assert!(g.gap < 1e-3 && g.stderr < 1e-3, "{g:?}");
    }
}
