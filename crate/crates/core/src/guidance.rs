//! Zero-shot likelihood guidance.
//!
//! The posterior score splits into the prior score plus a likelihood score.
//! The likelihood `p(y | x(t))` is approximated by a Gaussian centred on the
//! observation of the Tweedie denoised state
//! `x̂ = (x(t) + σ(t)²·s(x(t), t)) / μ(t)`:
//!
//! * SDA: covariance `Σ_y + (σ²/μ²)·AΓAᵀ`, with `AΓAᵀ` either replaced by a
//!   constant `γ·I` or computed from the operator Jacobian at `x̂`;
//! * DPS: covariance `Σ_y` alone.
//!
//! In both cases the gradient flows through `x̂`, including the Jacobian of
//! the prior score. The covariance is treated as constant in `x(t)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{check_finite, check_len, Error, Result};
use crate::rng;
use crate::score::{ScoreFn, ScoreVjp};

/// `x̂ = (x_t + σ(t)²·score) / μ(t)`.
pub fn tweedie_denoise(
    schedule: &DiffusionSchedule,
    score: &[f64],
    x_t: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_len(x_t.len(), score.len())?;
    let (mu, sigma) = schedule.coefficients(t)?;
    if mu < 1e-12 {
        return Err(Error::InvalidConfig(format!(
            "Tweedie denoising needs μ(t) ≥ 1e-12, got {mu} at t = {t}"
        )));
    }
    let s2 = sigma * sigma;
    Ok(x_t
        .iter()
        .zip(score)
        .map(|(x, s)| (x + s2 * s) / mu)
        .collect())
}

/// Surrogate for the covariance of `p(x | x(t))` up to the factor `σ²/μ²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMatrix {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl GammaMatrix {
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            GammaMatrix::Scalar(g) => Ok(v.iter().map(|x| g * x).collect()),
            GammaMatrix::Diagonal(d) => {
                check_len(d.len(), v.len())?;
                Ok(v.iter().zip(d).map(|(x, g)| g * x).collect())
            }
            GammaMatrix::Dense(m) => {
                check_len(m.ncols(), v.len())?;
                Ok((m * DVector::from_column_slice(v)).as_slice().to_vec())
            }
        }
    }

    pub fn eigenvalues(&self, dim: usize) -> Vec<f64> {
        match self {
            GammaMatrix::Scalar(g) => vec![*g; dim],
            GammaMatrix::Diagonal(d) => d.clone(),
            GammaMatrix::Dense(m) => SymmetricEigen::new(m.clone()).eigenvalues.as_slice().to_vec(),
        }
    }
}

/// `Γ = Q·Λ(Λ + I)⁻¹·Qᵀ` for the eigendecomposition `Σ_x = QΛQᵀ` of a Gaussian prior.
pub fn gamma_from_prior_cov(sigma_x: &DMatrix<f64>) -> Result<GammaMatrix> {
    let n = sigma_x.nrows();
    if sigma_x.ncols() != n {
        return Err(Error::InvalidConfig("prior covariance must be square".into()));
    }
    let scale = sigma_x.amax().max(1.0);
    if (sigma_x - sigma_x.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidConfig("prior covariance must be symmetric".into()));
    }
    let eig = SymmetricEigen::new(sigma_x.clone());
    if eig.eigenvalues.iter().any(|l| *l < -1e-10 * scale) {
        return Err(Error::NotPositiveDefinite(
            "prior covariance has a negative eigenvalue".into(),
        ));
    }
    let shrunk = eig.eigenvalues.map(|l| {
        let l = l.max(0.0);
        l / (l + 1.0)
    });
    let q = &eig.eigenvectors;
    Ok(GammaMatrix::Dense(q * DMatrix::from_diagonal(&shrunk) * q.transpose()))
}

/// Measurement functions `A: ℝ^{L×D} → ℝ^M` with vector-Jacobian products.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum ObservationOperator {
    Identity,
    /// Flat indices into the `L × D` trajectory.
    Mask { indices: Vec<usize> },
    /// States `start, start + step, …`, restricted to `channels` (all when empty).
    Stride {
        #[serde(default)]
        start: usize,
        step: usize,
        #[serde(default)]
        channels: Vec<usize>,
    },
    /// Every state, restricted to `channels`.
    Coordinates { channels: Vec<usize> },
    /// Means over consecutive, non-overlapping blocks of `width` states.
    TemporalAverage {
        width: usize,
        #[serde(default)]
        channels: Vec<usize>,
    },
    /// Mean over the channels of every state.
    SpatialAverage,
    /// `z ↦ z / (1 + |z|)` applied to the output of `inner`.
    Saturate { inner: Box<ObservationOperator> },
}

/// One observed value of a time-factorized operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTerm {
    pub y_index: usize,
    pub step: usize,
    pub channel: usize,
    pub saturate: bool,
}

fn channel_list(channels: &[usize], dim: usize) -> Result<Vec<usize>> {
    if channels.is_empty() {
        return Ok((0..dim).collect());
    }
    if let Some(c) = channels.iter().find(|c| **c >= dim) {
        return Err(Error::InvalidConfig(format!(
            "channel {c} does not exist in {dim}-dimensional states"
        )));
    }
    Ok(channels.to_vec())
}

fn saturate(z: f64) -> f64 {
    z / (1.0 + z.abs())
}

fn saturate_slope(z: f64) -> f64 {
    1.0 / (1.0 + z.abs()).powi(2)
}

impl ObservationOperator {
    /// Flat source index of every output, for operators that only select entries.
    fn selection(&self, len: usize, dim: usize) -> Result<Option<Vec<usize>>> {
        Ok(Some(match self {
            ObservationOperator::Identity => (0..len * dim).collect(),
            ObservationOperator::Mask { indices } => {
                if let Some(i) = indices.iter().find(|i| **i >= len * dim) {
                    return Err(Error::InvalidConfig(format!(
                        "mask index {i} is outside a {len}×{dim} trajectory"
                    )));
                }
                indices.clone()
            }
            ObservationOperator::Stride {
                start,
                step,
                channels,
            } => {
                if *step == 0 || *start >= len {
                    return Err(Error::InvalidConfig(
                        "stride needs a positive step and a start inside the trajectory".into(),
                    ));
                }
                let ch = channel_list(channels, dim)?;
                (*start..len)
                    .step_by(*step)
                    .flat_map(|i| ch.iter().map(move |c| i * dim + c))
                    .collect()
            }
            ObservationOperator::Coordinates { channels } => {
                let ch = channel_list(channels, dim)?;
                (0..len)
                    .flat_map(|i| ch.iter().map(move |c| i * dim + c))
                    .collect()
            }
            _ => return Ok(None),
        }))
    }

    pub fn output_len(&self, len: usize, dim: usize) -> Result<usize> {
        if let Some(sel) = self.selection(len, dim)? {
            return Ok(sel.len());
        }
        match self {
            ObservationOperator::TemporalAverage { width, channels } => {
                if *width == 0 || *width > len {
                    return Err(Error::InvalidConfig("averaging width must be in 1..=L".into()));
                }
                Ok(len / width * channel_list(channels, dim)?.len())
            }
            ObservationOperator::SpatialAverage => Ok(len),
            ObservationOperator::Saturate { inner } => inner.output_len(len, dim),
            _ => unreachable!("selection operators handled above"),
        }
    }

    pub fn apply(&self, x: &[f64], len: usize, dim: usize) -> Result<Vec<f64>> {
        check_len(len * dim, x.len())?;
        if let Some(sel) = self.selection(len, dim)? {
            return Ok(sel.iter().map(|&i| x[i]).collect());
        }
        Ok(match self {
            ObservationOperator::TemporalAverage { width, channels } => {
                let ch = channel_list(channels, dim)?;
                let blocks = len / width;
                let mut out = Vec::with_capacity(blocks * ch.len());
                for b in 0..blocks {
                    for &c in &ch {
                        let s: f64 = (b * width..(b + 1) * width).map(|i| x[i * dim + c]).sum();
                        out.push(s / *width as f64);
                    }
                }
                out
            }
            ObservationOperator::SpatialAverage => x
                .chunks(dim)
                .map(|s| s.iter().sum::<f64>() / dim as f64)
                .collect(),
            ObservationOperator::Saturate { inner } => inner
                .apply(x, len, dim)?
                .into_iter()
                .map(saturate)
                .collect(),
            _ => unreachable!("selection operators handled above"),
        })
    }

    /// `(∂A/∂x)ᵀ · cotangent` at `x`.
    pub fn vjp(&self, x: &[f64], len: usize, dim: usize, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_len(len * dim, x.len())?;
        check_len(self.output_len(len, dim)?, cotangent.len())?;
        let mut out = vec![0.0; x.len()];
        if let Some(sel) = self.selection(len, dim)? {
            for (&i, c) in sel.iter().zip(cotangent) {
                out[i] += c;
            }
            return Ok(out);
        }
        match self {
            ObservationOperator::TemporalAverage { width, channels } => {
                let ch = channel_list(channels, dim)?;
                for b in 0..len / width {
                    for (k, &c) in ch.iter().enumerate() {
                        let g = cotangent[b * ch.len() + k] / *width as f64;
                        for i in b * width..(b + 1) * width {
                            out[i * dim + c] += g;
                        }
                    }
                }
            }
            ObservationOperator::SpatialAverage => {
                for (i, g) in cotangent.iter().enumerate() {
                    for c in 0..dim {
                        out[i * dim + c] += g / dim as f64;
                    }
                }
            }
            ObservationOperator::Saturate { inner } => {
                let z = inner.apply(x, len, dim)?;
                let scaled: Vec<f64> = z
                    .iter()
                    .zip(cotangent)
                    .map(|(z, c)| c * saturate_slope(*z))
                    .collect();
                return inner.vjp(x, len, dim, &scaled);
            }
            _ => unreachable!("selection operators handled above"),
        }
        Ok(out)
    }

    /// Splits the operator over time steps when every output reads a single state entry.
    pub fn stepwise(&self, len: usize, dim: usize) -> Result<Option<Vec<StepTerm>>> {
        if let Some(sel) = self.selection(len, dim)? {
            return Ok(Some(
                sel.iter()
                    .enumerate()
                    .map(|(m, &i)| StepTerm {
                        y_index: m,
                        step: i / dim,
                        channel: i % dim,
                        saturate: false,
                    })
                    .collect(),
            ));
        }
        match self {
            ObservationOperator::Saturate { inner } => Ok(inner.stepwise(len, dim)?.map(|terms| {
                terms
                    .into_iter()
                    .filter(|t| !t.saturate)
                    .map(|t| StepTerm {
                        saturate: true,
                        ..t
                    })
                    .collect()
            })
            .filter(|terms: &Vec<StepTerm>| terms.len() == inner.output_len(len, dim).unwrap_or(0))),
            _ => Ok(None),
        }
    }
}

/// A Gaussian observation `y = A(x) + η`, `η ~ N(0, diag(noise_var))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationProcess {
    pub operator: ObservationOperator,
    pub len: usize,
    pub dim: usize,
    pub noise_var: Vec<f64>,
    pub y: Vec<f64>,
}

impl ObservationProcess {
    pub fn new(
        operator: ObservationOperator,
        len: usize,
        dim: usize,
        noise_var: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let m = operator.output_len(len, dim)?;
        check_len(m, y.len())?;
        check_len(m, noise_var.len())?;
        if noise_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("observation variances must be positive".into()));
        }
        check_finite(&y, || "observation".into())?;
        Ok(Self {
            operator,
            len,
            dim,
            noise_var,
            y,
        })
    }

    /// Observes `x` through the operator and adds noise of standard deviation `noise_std`.
    pub fn simulate(
        operator: ObservationOperator,
        x: &[f64],
        len: usize,
        dim: usize,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let clean = operator.apply(x, len, dim)?;
        let mut r = rng::stream(seed, 0);
        let noise = rng::normal_vec(&mut r, clean.len());
        let y = clean.iter().zip(noise).map(|(c, n)| c + noise_std * n).collect();
        Self::new(operator, len, dim, vec![noise_std * noise_std; clean.len()], y)
    }

    pub fn m(&self) -> usize {
        self.y.len()
    }

    pub fn trajectory_size(&self) -> usize {
        self.len * self.dim
    }

    /// `log N(y; A(x), Σ_y)` for a single trajectory.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let pred = self.operator.apply(x, self.len, self.dim)?;
        let mut ll = -0.5 * self.m() as f64 * (2.0 * std::f64::consts::PI).ln();
        for ((y, p), v) in self.y.iter().zip(&pred).zip(&self.noise_var) {
            ll -= 0.5 * (v.ln() + (y - p).powi(2) / v);
        }
        Ok(ll)
    }
}

/// Covariance model of the approximate perturbed likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodCovariance {
    /// `AΓAᵀ ≈ γ·I` in observation space.
    Surrogate(f64),
    /// `AΓAᵀ` from the operator Jacobian at the denoised state.
    Projected(GammaMatrix),
}

impl Default for LikelihoodCovariance {
    fn default() -> Self {
        LikelihoodCovariance::Surrogate(1e-2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodVariant {
    Sda(LikelihoodCovariance),
    Dps,
}

/// Likelihood guidance for one observation process.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub observation: ObservationProcess,
    pub variant: LikelihoodVariant,
    pub schedule: DiffusionSchedule,
}

impl Guidance {
    pub fn new(observation: ObservationProcess, variant: LikelihoodVariant) -> Self {
        Self {
            observation,
            variant,
            schedule: DiffusionSchedule::vp_cosine(),
        }
    }

    /// `C⁻¹·(y − A(x̂))` for one denoised trajectory.
    fn weighted_residual(&self, x_hat: &[f64], kappa: f64) -> Result<Vec<f64>> {
        let obs = &self.observation;
        let pred = obs.operator.apply(x_hat, obs.len, obs.dim)?;
        let resid: Vec<f64> = obs.y.iter().zip(&pred).map(|(y, p)| y - p).collect();
        match &self.variant {
            LikelihoodVariant::Dps => Ok(resid
                .iter()
                .zip(&obs.noise_var)
                .map(|(r, v)| r / v)
                .collect()),
            LikelihoodVariant::Sda(LikelihoodCovariance::Surrogate(gamma)) => Ok(resid
                .iter()
                .zip(&obs.noise_var)
                .map(|(r, v)| r / (v + kappa * gamma))
                .collect()),
            LikelihoodVariant::Sda(LikelihoodCovariance::Projected(gamma)) => {
                let m = obs.m();
                let n = x_hat.len();
                // rows of the Jacobian A at x̂
                let mut jac = DMatrix::zeros(m, n);
                let mut unit = vec![0.0; m];
                for r in 0..m {
                    unit[r] = 1.0;
                    let row = obs.operator.vjp(x_hat, obs.len, obs.dim, &unit)?;
                    unit[r] = 0.0;
                    for (c, v) in row.iter().enumerate() {
                        jac[(r, c)] = *v;
                    }
                }
                let mut gamma_jt = DMatrix::zeros(n, m);
                for r in 0..m {
                    let g = gamma.apply(jac.row(r).transpose().as_slice())?;
                    gamma_jt.set_column(r, &DVector::from_vec(g));
                }
                let mut cov = &jac * gamma_jt * kappa;
                for r in 0..m {
                    cov[(r, r)] += obs.noise_var[r];
                }
                let chol = cov.cholesky().ok_or_else(|| {
                    Error::NotPositiveDefinite("projected likelihood covariance".into())
                })?;
                Ok(chol.solve(&DVector::from_vec(resid)).as_slice().to_vec())
            }
        }
    }

    /// Prior score and likelihood score for a batch of trajectories.
    pub fn scores<S: ScoreVjp + ?Sized>(
        &self,
        prior: &S,
        x: &[f64],
        t: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let size = self.observation.trajectory_size();
        if x.is_empty() || !x.len().is_multiple_of(size) {
            return Err(Error::ShapeMismatch {
                expected: size,
                got: x.len(),
            });
        }
        let (mu, sigma) = self.schedule.coefficients(t)?;
        let prior_score = prior.score(x, t)?;
        check_finite(&prior_score, || format!("prior score at t = {t}"))?;
        let x_hat = tweedie_denoise(&self.schedule, &prior_score, x, t)?;
        let kappa = (sigma / mu).powi(2);
        let mut u = Vec::with_capacity(x.len());
        for traj in x_hat.chunks(size) {
            let g = self.weighted_residual(traj, kappa)?;
            let obs = &self.observation;
            u.extend(obs.operator.vjp(traj, obs.len, obs.dim, &g)?);
        }
        let s2 = sigma * sigma;
        let through_score = if s2 > 0.0 {
            prior.vjp(x, t, &u)?
        } else {
            vec![0.0; x.len()]
        };
        let likelihood: Vec<f64> = u
            .iter()
            .zip(&through_score)
            .map(|(u, w)| (u + s2 * w) / mu)
            .collect();
        check_finite(&likelihood, || format!("likelihood score at t = {t}"))?;
        Ok((prior_score, likelihood))
    }

    pub fn likelihood_score<S: ScoreVjp + ?Sized>(
        &self,
        prior: &S,
        x: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        self.scores(prior, x, t).map(|(_, l)| l)
    }

    pub fn posterior_score<S: ScoreVjp + ?Sized>(
        &self,
        prior: &S,
        x: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        let (mut s, l) = self.scores(prior, x, t)?;
        for (a, b) in s.iter_mut().zip(&l) {
            *a += b;
        }
        Ok(s)
    }
}

/// SDA likelihood score with the given `Γ` surrogate.
pub fn sda_likelihood_score<S: ScoreVjp + ?Sized>(
    x_t: &[f64],
    t: f64,
    obs: &ObservationProcess,
    prior: &S,
    covariance: LikelihoodCovariance,
) -> Result<Vec<f64>> {
    Guidance::new(obs.clone(), LikelihoodVariant::Sda(covariance)).likelihood_score(prior, x_t, t)
}

/// DPS likelihood score: covariance `Σ_y`, no inflation.
pub fn dps_likelihood_score<S: ScoreVjp + ?Sized>(
    x_t: &[f64],
    t: f64,
    obs: &ObservationProcess,
    prior: &S,
) -> Result<Vec<f64>> {
    Guidance::new(obs.clone(), LikelihoodVariant::Dps).likelihood_score(prior, x_t, t)
}

pub fn posterior_score<S: ScoreVjp + ?Sized>(
    x_t: &[f64],
    t: f64,
    obs: &ObservationProcess,
    prior: &S,
    variant: LikelihoodVariant,
) -> Result<Vec<f64>> {
    Guidance::new(obs.clone(), variant).posterior_score(prior, x_t, t)
}

/// Prior plus likelihood score, usable wherever a plain score is expected.
pub struct PosteriorScore<S> {
    pub prior: S,
    pub guidance: Guidance,
}

impl<S: ScoreVjp> ScoreFn for PosteriorScore<S> {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.guidance.posterior_score(&self.prior, x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::GaussianScore;

    #[test]
    fn tweedie_reductions() {
        let s = DiffusionSchedule::vp_cosine();
        let x = [0.4, -1.2];
        assert_eq!(tweedie_denoise(&s, &[3.0, 1.0], &x, 0.0).unwrap(), x.to_vec());
        let mu = s.mu(0.6).unwrap();
        let z = tweedie_denoise(&s, &[0.0, 0.0], &x, 0.6).unwrap();
        assert!((z[0] - x[0] / mu).abs() < 1e-15);
        // N(0,1) prior: exact score −x/(μ²+σ²) gives the Gaussian posterior mean μx/(μ²+σ²)
        let (mu, sigma) = s.coefficients(0.3).unwrap();
        let v = mu * mu + sigma * sigma;
        let d = tweedie_denoise(&s, &[-x[0] / v], &x[..1], 0.3).unwrap();
        assert!((d[0] - mu * x[0] / v).abs() < 1e-14);
    }

    #[test]
    fn gamma_from_covariance() {
        let g = gamma_from_prior_cov(&DMatrix::identity(3, 3)).unwrap();
        let GammaMatrix::Dense(m) = g else { panic!() };
        assert!((m - DMatrix::identity(3, 3) * 0.5).amax() < 1e-14);
        let GammaMatrix::Dense(z) = gamma_from_prior_cov(&DMatrix::zeros(2, 2)).unwrap() else {
            panic!()
        };
        assert!(z.amax() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let GammaMatrix::Dense(m) = gamma_from_prior_cov(&d).unwrap() else { panic!() };
        assert!((m[(0, 0)] - 0.75).abs() < 1e-14 && (m[(1, 1)] - 0.5).abs() < 1e-14);
        assert!(m[(0, 1)].abs() < 1e-14);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(gamma_from_prior_cov(&asym).is_err());
    }

    #[test]
    fn gamma_shares_eigenvectors_and_lies_in_unit_interval() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let g = gamma_from_prior_cov(&a).unwrap();
        let GammaMatrix::Dense(m) = &g else { panic!() };
        // commuting symmetric matrices share eigenvectors
        assert!((&a * m - m * &a).amax() < 1e-12);
        for l in g.eigenvalues(3) {
            assert!((0.0..1.0).contains(&l));
        }
    }

    #[test]
    fn operator_vjps_match_finite_differences() {
        let (len, dim) = (9, 3);
        let x: Vec<f64> = (0..len * dim).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let ops = vec![
            ObservationOperator::Identity,
            ObservationOperator::Mask { indices: vec![0, 5, 26] },
            ObservationOperator::Stride { start: 0, step: 4, channels: vec![0] },
            ObservationOperator::Coordinates { channels: vec![1, 2] },
            ObservationOperator::TemporalAverage { width: 2, channels: vec![] },
            ObservationOperator::SpatialAverage,
            ObservationOperator::Saturate {
                inner: Box::new(ObservationOperator::Stride { start: 1, step: 3, channels: vec![] }),
            },
        ];
        for op in ops {
            let m = op.output_len(len, dim).unwrap();
            let cot: Vec<f64> = (0..m).map(|i| (i as f64 * 0.9).cos()).collect();
            let g = op.vjp(&x, len, dim, &cot).unwrap();
            let f = |x: &[f64]| -> f64 {
                op.apply(x, len, dim).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum()
            };
            for i in 0..x.len() {
                let mut up = x.clone();
                up[i] += 1e-6;
                let mut down = x.clone();
                down[i] -= 1e-6;
                let fd = (f(&up) - f(&down)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-7, "{op:?} coordinate {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn stride_picks_every_eighth_state() {
        let op = ObservationOperator::Stride { start: 0, step: 8, channels: vec![0] };
        assert_eq!(op.output_len(65, 3).unwrap(), 9);
        let terms = op.stepwise(65, 3).unwrap().unwrap();
        assert_eq!(terms.iter().map(|t| t.step).collect::<Vec<_>>(), vec![0, 8, 16, 24, 32, 40, 48, 56, 64]);
        assert!(ObservationOperator::SpatialAverage.stepwise(65, 3).unwrap().is_none());
        let sat = ObservationOperator::Saturate { inner: Box::new(op) };
        assert!(sat.stepwise(65, 3).unwrap().unwrap().iter().all(|t| t.saturate));
    }

    #[test]
    fn descriptor_round_trips_through_json() {
        let op = ObservationOperator::Saturate {
            inner: Box::new(ObservationOperator::Stride { start: 0, step: 8, channels: vec![0] }),
        };
        let text = serde_json::to_string(&op).unwrap();
        assert_eq!(serde_json::from_str::<ObservationOperator>(&text).unwrap(), op);
    }

    #[test]
    fn log_likelihood_normalizer_and_offset() {
        let obs = ObservationProcess::new(
            ObservationOperator::Identity,
            2,
            1,
            vec![0.25, 4.0],
            vec![1.0, -1.0],
        )
        .unwrap();
        let norm = -(2.0f64 * std::f64::consts::PI).ln() - 0.5 * (0.25f64 * 4.0).ln();
        assert!((obs.log_likelihood(&[1.0, -1.0]).unwrap() - norm).abs() < 1e-14);
        let off = obs.log_likelihood(&[1.5, -1.0]).unwrap();
        assert!((off - (norm - 0.25 / (2.0 * 0.25))).abs() < 1e-14);
    }

    fn scalar_obs(y: f64, r2: f64) -> ObservationProcess {
        ObservationProcess::new(ObservationOperator::Identity, 1, 1, vec![r2], vec![y]).unwrap()
    }

    #[test]
    fn exact_likelihood_score_at_time_zero() {
        let prior = GaussianScore::standard(1);
        let obs = scalar_obs(0.7, 0.04);
        let x = [0.2];
        for variant in [
            LikelihoodVariant::Dps,
            LikelihoodVariant::Sda(LikelihoodCovariance::Surrogate(0.5)),
        ] {
            let s = Guidance::new(obs.clone(), variant).likelihood_score(&prior, &x, 0.0).unwrap();
            assert!((s[0] - (0.7 - 0.2) / 0.04).abs() < 1e-8);
        }
    }

    #[test]
    fn stationary_when_observation_matches_denoised_state() {
        let prior = GaussianScore::standard(1);
        let t = 0.4;
        let mu = DiffusionSchedule::vp_cosine().mu(t).unwrap();
        let x = [0.9];
        // x̂ = μ·x for a standard normal prior
        let obs = scalar_obs(mu * x[0], 0.1);
        for variant in [LikelihoodVariant::Dps, LikelihoodVariant::Sda(LikelihoodCovariance::default())] {
            let s = Guidance::new(obs.clone(), variant).likelihood_score(&prior, &x, t).unwrap();
            assert!(s[0].abs() < 1e-14);
        }
    }

    #[test]
    fn vanishing_likelihood_leaves_prior_score() {
        let prior = GaussianScore::standard(2);
        let obs = ObservationProcess::new(
            ObservationOperator::Identity,
            2,
            1,
            vec![1e30; 2],
            vec![3.0, -3.0],
        )
        .unwrap();
        let x = [0.5, 0.1];
        let g = Guidance::new(obs, LikelihoodVariant::Sda(LikelihoodCovariance::default()));
        let post = g.posterior_score(&prior, &x, 0.5).unwrap();
        let pri = prior.score(&x, 0.5).unwrap();
        for (a, b) in post.iter().zip(&pri) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn variant_only_changes_the_likelihood_term() {
        let prior = GaussianScore::standard(1);
        let obs = scalar_obs(1.0, 0.05);
        let sda = Guidance::new(obs.clone(), LikelihoodVariant::Sda(LikelihoodCovariance::default()));
        let dps = Guidance::new(obs, LikelihoodVariant::Dps);
        let (pa, la) = sda.scores(&prior, &[0.3], 0.5).unwrap();
        let (pb, lb) = dps.scores(&prior, &[0.3], 0.5).unwrap();
        assert_eq!(pa, pb);
        assert_ne!(la, lb);
    }

    #[test]
    fn projected_and_surrogate_agree_for_identity_and_scalar_gamma() {
        let prior = GaussianScore::standard(3);
        let obs = ObservationProcess::new(
            ObservationOperator::Identity,
            3,
            1,
            vec![0.1; 3],
            vec![0.5, -0.5, 1.0],
        )
        .unwrap();
        let x = [0.1, 0.2, 0.3];
        let a = sda_likelihood_score(&x, 0.6, &obs, &prior, LikelihoodCovariance::Surrogate(0.5)).unwrap();
        let b = sda_likelihood_score(
            &x,
            0.6,
            &obs,
            &prior,
            LikelihoodCovariance::Projected(GammaMatrix::Scalar(0.5)),
        )
        .unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
