//! Reference posteriors: a bootstrap particle filter with ancestral trajectory
//! draws and an exact Kalman/RTS smoother for linear-Gaussian models.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::guidance::{ObservationProcess, StepTerm};
use crate::lorenz::{LorenzModel, Standardization, STATE_DIM};
use crate::rng::{self, Rng};

/// Particles propagated with one random stream. Fixed so that results do not
/// depend on the number of worker threads.
const PARTICLE_CHUNK: usize = 1024;
const RESAMPLE_STREAMS: u64 = 1 << 62;
const DRAW_STREAM: u64 = 1 << 61;

/// A Markov state-space prior `p(x_1) Π p(x_{i+1} | x_i)`.
pub trait StateSpaceModel: Sync {
    fn state_dim(&self) -> usize;
    fn sample_initial(&self, rng: &mut Rng) -> Result<Vec<f64>>;
    fn sample_transition(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
    fn transition_log_density(&self, x: &[f64], next: &[f64]) -> f64;
}

/// The stochastic Lorenz system with a stationary initial distribution.
#[derive(Clone, Debug)]
pub struct LorenzSsm {
    pub model: LorenzModel,
    pub burn_in: usize,
}

impl StateSpaceModel for LorenzSsm {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn sample_initial(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.model.stationary_draw(self.burn_in, rng)?.to_vec())
    }

    fn sample_transition(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        check_len(STATE_DIM, x.len())?;
        Ok(self.model.transition([x[0], x[1], x[2]], rng)?.to_vec())
    }

    fn transition_log_density(&self, x: &[f64], next: &[f64]) -> f64 {
        self.model.transition_log_density(x, next)
    }
}

/// `x_1 ~ N(m0, P0)`, `x_{i+1} = A x_i + w`, `w ~ N(0, Q)`.
#[derive(Clone, Debug)]
pub struct LinearGaussianSsm {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
    q_factor: DMatrix<f64>,
    p0_factor: DMatrix<f64>,
    q_chol: Option<Cholesky<f64, Dyn>>,
}

/// Square root `L` with `L·Lᵀ = S` for a positive semi-definite `S`.
fn psd_factor(s: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let scale = s.amax().max(1.0);
    if (s - s.transpose()).amax() > 1e-12 * scale {
        return Err(Error::NotPositiveDefinite(format!("{what} is not symmetric")));
    }
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().any(|l| *l < -1e-10 * scale) {
        return Err(Error::NotPositiveDefinite(format!("{what} has a negative eigenvalue")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

impl LinearGaussianSsm {
    pub fn new(a: DMatrix<f64>, q: DMatrix<f64>, m0: DVector<f64>, p0: DMatrix<f64>) -> Result<Self> {
        let d = m0.len();
        for (m, name) in [(&a, "A"), (&q, "Q"), (&p0, "P0")] {
            if m.shape() != (d, d) {
                return Err(Error::InvalidConfig(format!("{name} must be {d}×{d}")));
            }
        }
        let q_factor = psd_factor(&q, "process noise covariance")?;
        let p0_factor = psd_factor(&p0, "initial covariance")?;
        let q_chol = q.clone().cholesky();
        Ok(Self {
            a,
            q,
            m0,
            p0,
            q_factor,
            p0_factor,
            q_chol,
        })
    }

    /// Scalar AR(1) model `x_{i+1} = a·x_i + N(0, q)` with `x_1 ~ N(m0, p0)`.
    pub fn scalar(a: f64, q: f64, m0: f64, p0: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, q),
            DVector::from_element(1, m0),
            DMatrix::from_element(1, 1, p0),
        )
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }

    /// Simulates one trajectory of `len` states.
    pub fn simulate(&self, len: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(len * self.dim());
        let mut x = self.sample_initial(rng)?;
        for i in 0..len {
            if i > 0 {
                x = self.sample_transition(&x, rng)?;
            }
            out.extend_from_slice(&x);
        }
        Ok(out)
    }
}

impl StateSpaceModel for LinearGaussianSsm {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn sample_initial(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        let e = DVector::from_vec(rng::normal_vec(rng, self.dim()));
        Ok((&self.m0 + &self.p0_factor * e).as_slice().to_vec())
    }

    fn sample_transition(&self, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        let e = DVector::from_vec(rng::normal_vec(rng, self.dim()));
        let mean = &self.a * DVector::from_column_slice(x);
        Ok((mean + &self.q_factor * e).as_slice().to_vec())
    }

    fn transition_log_density(&self, x: &[f64], next: &[f64]) -> f64 {
        let Some(chol) = &self.q_chol else {
            return f64::NAN;
        };
        let r = DVector::from_column_slice(next) - &self.a * DVector::from_column_slice(x);
        let quad = r.dot(&chol.solve(&r));
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (quad + log_det + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln())
    }
}

/// A global observation split into per-step Gaussian factors.
#[derive(Clone, Debug)]
pub struct StepLikelihood {
    /// `(y, variance, channel, saturate)` for each observed value, grouped by step.
    steps: Vec<Vec<(f64, f64, usize, bool)>>,
    /// Maps model states to the coordinates the observation was made in.
    transform: Standardization,
}

impl StepLikelihood {
    /// `transform` converts model states to the observation's coordinates; pass
    /// `None` when they coincide.
    pub fn new(obs: &ObservationProcess, transform: Option<&Standardization>) -> Result<Self> {
        let terms: Vec<StepTerm> = obs.operator.stepwise(obs.len, obs.dim)?.ok_or_else(|| {
            Error::InvalidConfig(
                "the particle filter needs an observation that factorizes over time steps".into(),
            )
        })?;
        let transform = transform.cloned().unwrap_or_else(|| Standardization::identity(obs.dim));
        check_len(obs.dim, transform.dim())?;
        let mut steps = vec![Vec::new(); obs.len];
        for t in terms {
            steps[t.step].push((obs.y[t.y_index], obs.noise_var[t.y_index], t.channel, t.saturate));
        }
        Ok(Self { steps, transform })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn observed(&self, step: usize) -> bool {
        !self.steps[step].is_empty()
    }

    /// Linear observation rows `(channel, y, variance)` of one step.
    pub fn linear_terms(&self, step: usize) -> Result<Vec<(usize, f64, f64)>> {
        self.steps[step]
            .iter()
            .map(|&(y, v, c, sat)| {
                if sat || !self.transform.is_identity() {
                    Err(Error::InvalidConfig("the Kalman smoother needs a linear observation".into()))
                } else {
                    Ok((c, y, v))
                }
            })
            .collect()
    }

    pub fn log_likelihood(&self, step: usize, x: &[f64]) -> f64 {
        let mut ll = 0.0;
        for &(y, v, c, sat) in &self.steps[step] {
            let mut z = (x[c] - self.transform.means[c]) / self.transform.stds[c];
            if sat {
                z /= 1.0 + z.abs();
            }
            ll -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (y - z).powi(2) / v);
        }
        ll
    }
}

/// Indices drawn by systematic resampling from normalized `weights`.
pub fn systematic_resample(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut j = 0;
    for i in 0..n {
        let point = (i as f64 + u) / n as f64;
        while cumulative < point && j + 1 < weights.len() {
            j += 1;
            cumulative += weights[j];
        }
        out.push(j);
    }
    out
}

/// `log mean exp` and the normalized weights of a set of log-weights.
fn normalize(log_w: &[f64], step: usize) -> Result<(f64, Vec<f64>)> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::ParticleCollapse { step });
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::ParticleCollapse { step });
    }
    let lme = max + (total / log_w.len() as f64).ln();
    Ok((lme, w.into_iter().map(|x| x / total).collect()))
}

#[derive(Clone, Debug)]
pub struct BpfOutput {
    /// `n_draws × len × dim` trajectories traced back through the genealogy.
    pub trajectories: Vec<f64>,
    pub len: usize,
    pub dim: usize,
    /// Estimate of `log p(y)`.
    pub log_evidence: f64,
    /// Weighted mean over all final genealogies, `len × dim`.
    pub smoothed_mean: Vec<f64>,
    /// Effective sample size of the weights at every step.
    pub ess: Vec<f64>,
}

/// Bootstrap particle filter with resampling at every step.
///
/// Particles are propagated in fixed chunks, each drawing from its own stream,
/// so output depends only on `seed`.
pub fn bpf_sample<M: StateSpaceModel + ?Sized>(
    model: &M,
    likelihood: &StepLikelihood,
    particles: usize,
    n_draws: usize,
    seed: u64,
) -> Result<BpfOutput> {
    if particles < 2 {
        return Err(Error::InvalidConfig("the particle filter needs at least 2 particles".into()));
    }
    if n_draws == 0 {
        return Err(Error::InvalidConfig("n_draws must be positive".into()));
    }
    let len = likelihood.len();
    if len == 0 {
        return Err(Error::InvalidConfig("empty observation window".into()));
    }
    let dim = model.state_dim();
    let n_chunks = particles.div_ceil(PARTICLE_CHUNK) as u64;
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut ancestors: Vec<Vec<usize>> = Vec::with_capacity(len);
    let mut log_evidence = 0.0;
    let mut ess = Vec::with_capacity(len);
    let mut weights = vec![1.0 / particles as f64; particles];

    for step in 0..len {
        let parents = if step == 0 {
            Vec::new()
        } else {
            let mut r = rng::stream(seed, RESAMPLE_STREAMS + step as u64);
            systematic_resample(&weights, particles, r.random::<f64>())
        };
        let prev = states.last();
        let propagated: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n_chunks as usize)
            .into_par_iter()
            .map(|c| {
                let mut r = rng::stream(seed, step as u64 * n_chunks + c as u64);
                let range = c * PARTICLE_CHUNK..((c + 1) * PARTICLE_CHUNK).min(particles);
                let mut xs = Vec::with_capacity(range.len() * dim);
                let mut lw = Vec::with_capacity(range.len());
                for p in range {
                    let x = match prev {
                        None => model.sample_initial(&mut r)?,
                        Some(s) => {
                            let a = parents[p];
                            model.sample_transition(&s[a * dim..(a + 1) * dim], &mut r)?
                        }
                    };
                    lw.push(likelihood.log_likelihood(step, &x));
                    xs.extend(x);
                }
                Ok((xs, lw))
            })
            .collect();
        let mut xs = Vec::with_capacity(particles * dim);
        let mut log_w = Vec::with_capacity(particles);
        for chunk in propagated {
            let (x, l) = chunk?;
            xs.extend(x);
            log_w.extend(l);
        }
        let (lme, w) = normalize(&log_w, step)?;
        log_evidence += lme;
        ess.push(1.0 / w.iter().map(|x| x * x).sum::<f64>());
        weights = w;
        states.push(xs);
        ancestors.push(parents);
    }

    let trace = |mut p: usize, out: &mut [f64]| {
        for i in (0..len).rev() {
            out[i * dim..(i + 1) * dim].copy_from_slice(&states[i][p * dim..(p + 1) * dim]);
            if i > 0 {
                p = ancestors[i][p];
            }
        }
    };

    let mut smoothed_mean = vec![0.0; len * dim];
    let mut path = vec![0.0; len * dim];
    for (p, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            trace(p, &mut path);
            for (m, x) in smoothed_mean.iter_mut().zip(&path) {
                *m += w * x;
            }
        }
    }

    let mut r = rng::stream(seed, DRAW_STREAM);
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let mut trajectories = vec![0.0; n_draws * len * dim];
    for out in trajectories.chunks_mut(len * dim) {
        let u = r.random::<f64>() * cumulative[particles - 1];
        let p = cumulative.partition_point(|c| *c <= u).min(particles - 1);
        trace(p, out);
    }
    Ok(BpfOutput {
        trajectories,
        len,
        dim,
        log_evidence,
        smoothed_mean,
        ess,
    })
}

#[derive(Clone, Debug)]
pub struct KalmanOutput {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub log_evidence: f64,
}

fn solve_psd(s: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    let scale = s.amax().max(1e-300);
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().any(|l| *l < -1e-10 * scale) {
        return Err(Error::NotPositiveDefinite("predicted covariance".into()));
    }
    let pinv = s
        .clone()
        .pseudo_inverse(1e-12 * scale)
        .map_err(|e| Error::NotPositiveDefinite(e.to_string()))?;
    Ok(pinv * rhs)
}

/// Exact filtering and Rauch-Tung-Striebel smoothing with the evidence `log p(y)`.
pub fn kalman_smoother(model: &LinearGaussianSsm, likelihood: &StepLikelihood) -> Result<KalmanOutput> {
    let len = likelihood.len();
    let d = model.dim();
    let mut predicted: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::with_capacity(len);
    let mut filtered: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::with_capacity(len);
    let mut log_evidence = 0.0;
    for step in 0..len {
        let (m_pred, p_pred) = match filtered.last() {
            None => (model.m0.clone(), model.p0.clone()),
            Some((m, p)) => (&model.a * m, &model.a * p * model.a.transpose() + &model.q),
        };
        let terms = likelihood.linear_terms(step)?;
        let (mut m, mut p) = (m_pred.clone(), p_pred.clone());
        if !terms.is_empty() {
            let k = terms.len();
            let mut h = DMatrix::zeros(k, d);
            let mut y = DVector::zeros(k);
            let mut r = DMatrix::zeros(k, k);
            for (row, &(c, yv, var)) in terms.iter().enumerate() {
                h[(row, c)] = 1.0;
                y[row] = yv;
                r[(row, row)] = var;
            }
            let s = &h * &p_pred * h.transpose() + &r;
            let chol = s
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
            let innov = &y - &h * &m_pred;
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            log_evidence -= 0.5
                * (innov.dot(&chol.solve(&innov))
                    + log_det
                    + k as f64 * (2.0 * std::f64::consts::PI).ln());
            let gain = (chol.solve(&(&h * &p_pred))).transpose();
            m = &m_pred + &gain * innov;
            let i_kh = DMatrix::identity(d, d) - &gain * &h;
            p = &i_kh * &p_pred * i_kh.transpose() + &gain * r * gain.transpose();
        }
        predicted.push((m_pred, p_pred));
        filtered.push((m, p));
    }
    let mut means = vec![DVector::zeros(d); len];
    let mut covariances = vec![DMatrix::zeros(d, d); len];
    means[len - 1] = filtered[len - 1].0.clone();
    covariances[len - 1] = filtered[len - 1].1.clone();
    for i in (0..len.saturating_sub(1)).rev() {
        let (m, p) = &filtered[i];
        let (m_next, p_next) = &predicted[i + 1];
        // G = P Aᵀ P_next⁻¹, computed as (P_next⁻¹ A P)ᵀ
        let g = solve_psd(p_next, &(&model.a * p))?.transpose();
        means[i] = m + &g * (&means[i + 1] - m_next);
        covariances[i] = p + &g * (&covariances[i + 1] - p_next) * g.transpose();
    }
    Ok(KalmanOutput {
        means,
        covariances,
        log_evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::ObservationOperator;

    fn scalar_obs(y: Vec<f64>, var: f64) -> ObservationProcess {
        let n = y.len();
        ObservationProcess::new(ObservationOperator::Identity, n, 1, vec![var; n], y).unwrap()
    }

    #[test]
    fn systematic_resampling_keeps_size_and_follows_weights() {
        let idx = systematic_resample(&[0.5, 0.0, 0.25, 0.25], 8, 0.5);
        assert_eq!(idx, vec![0, 0, 0, 0, 2, 2, 3, 3]);
        let idx = systematic_resample(&[1.0], 5, 0.99);
        assert_eq!(idx, vec![0; 5]);
    }

    #[test]
    fn exact_observations_pin_the_smoother() {
        let model = LinearGaussianSsm::scalar(0.9, 0.0, 0.0, 1.0).unwrap();
        let y: Vec<f64> = (0..5).map(|i| 0.9f64.powi(i) * 1.3).collect();
        let out = kalman_smoother(&model, &StepLikelihood::new(&scalar_obs(y.clone(), 1e-12), None).unwrap())
            .unwrap();
        for (m, y) in out.means.iter().zip(&y) {
            assert!((m[0] - y).abs() < 1e-6, "{} vs {y}", m[0]);
        }
    }

    #[test]
    fn uninformative_observations_return_prior_marginals() {
        let model = LinearGaussianSsm::scalar(0.9, 0.1, 0.5, 1.0).unwrap();
        let out = kalman_smoother(&model, &StepLikelihood::new(&scalar_obs(vec![3.0; 4], 1e14), None).unwrap())
            .unwrap();
        let (mut m, mut p) = (0.5, 1.0);
        for i in 0..4 {
            assert!((out.means[i][0] - m).abs() < 1e-9);
            assert!((out.covariances[i][(0, 0)] - p).abs() < 1e-9);
            m *= 0.9;
            p = 0.81 * p + 0.1;
        }
    }

    #[test]
    fn smoother_matches_dense_conditioning() {
        // two-dimensional states, three steps, first channel observed
        let a = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, -0.1, 0.9]);
        let q = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]);
        let m0 = DVector::from_vec(vec![0.5, -0.3]);
        let p0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let model = LinearGaussianSsm::new(a.clone(), q.clone(), m0.clone(), p0.clone()).unwrap();
        let op = ObservationOperator::Coordinates { channels: vec![0] };
        let y = vec![0.7, -0.2, 1.1];
        let obs = ObservationProcess::new(op, 3, 2, vec![0.25; 3], y.clone()).unwrap();
        let out = kalman_smoother(&model, &StepLikelihood::new(&obs, None).unwrap()).unwrap();

        // joint prior of (x1, x2, x3)
        let n = 6;
        let mut mean = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        let mut m = m0.clone();
        let mut p = p0.clone();
        let mut blocks = vec![p0.clone()];
        mean.rows_mut(0, 2).copy_from(&m);
        for i in 1..3 {
            m = &a * m;
            p = &a * p * a.transpose() + &q;
            mean.rows_mut(2 * i, 2).copy_from(&m);
            blocks.push(p.clone());
        }
        for i in 0..3 {
            for j in i..3 {
                // Cov(x_j, x_i) = A^{j−i} P_i
                let mut c = blocks[i].clone();
                for _ in i..j {
                    c = &a * c;
                }
                cov.view_mut((2 * j, 2 * i), (2, 2)).copy_from(&c);
                cov.view_mut((2 * i, 2 * j), (2, 2)).copy_from(&c.transpose());
            }
        }
        let mut h = DMatrix::zeros(3, n);
        for i in 0..3 {
            h[(i, 2 * i)] = 1.0;
        }
        let s = &h * &cov * h.transpose() + DMatrix::identity(3, 3) * 0.25;
        let gain = &cov * h.transpose() * s.clone().try_inverse().unwrap();
        let post_mean = &mean + &gain * (DVector::from_vec(y) - &h * &mean);
        let post_cov = &cov - &gain * &h * &cov;
        for i in 0..3 {
            for c in 0..2 {
                assert!((out.means[i][c] - post_mean[2 * i + c]).abs() < 1e-12);
                for c2 in 0..2 {
                    assert!((out.covariances[i][(c, c2)] - post_cov[(2 * i + c, 2 * i + c2)]).abs() < 1e-12);
                }
            }
        }
        // evidence: log N(y; H mean, S)
        let r = DVector::from_vec(vec![0.7, -0.2, 1.1]) - &h * &mean;
        let exact = -0.5
            * (r.dot(&(s.clone().try_inverse().unwrap() * &r))
                + s.determinant().ln()
                + 3.0 * (2.0 * std::f64::consts::PI).ln());
        assert!((out.log_evidence - exact).abs() < 1e-12);
    }

    #[test]
    fn non_psd_inputs_are_rejected() {
        assert!(LinearGaussianSsm::scalar(0.9, -0.1, 0.0, 1.0).is_err());
        assert!(LinearGaussianSsm::scalar(0.9, 0.1, 0.0, -1.0).is_err());
    }

    #[test]
    fn uninformative_filter_returns_prior_draws() {
        let model = LinearGaussianSsm::scalar(0.9, 0.1, 0.0, 1.0).unwrap();
        let obs = ObservationProcess::new(ObservationOperator::Mask { indices: vec![] }, 6, 1, vec![], vec![]).unwrap();
        let lik = StepLikelihood::new(&obs, None).unwrap();
        let out = bpf_sample(&model, &lik, 4096, 4096, 1).unwrap();
        assert_eq!(out.log_evidence, 0.0);
        assert!(out.ess.iter().all(|e| (*e - 4096.0).abs() < 1e-6));
        let last: Vec<f64> = out.trajectories.chunks(6).map(|t| t[5]).collect();
        let var = last.iter().map(|x| x * x).sum::<f64>() / last.len() as f64;
        // prior variance at step 6
        let mut p = 1.0;
        for _ in 0..5 {
            p = 0.81 * p + 0.1;
        }
        assert!((var - p).abs() < 3.0 * p * (2.0 / 4096.0f64).sqrt(), "{var} vs {p}");
    }

    #[test]
    fn two_particle_runs_are_reproducible() {
        let model = LinearGaussianSsm::scalar(0.9, 0.1, 0.0, 1.0).unwrap();
        let lik = StepLikelihood::new(&scalar_obs(vec![0.1, 0.2, 0.3], 0.25), None).unwrap();
        let a = bpf_sample(&model, &lik, 2, 3, 8).unwrap();
        let b = bpf_sample(&model, &lik, 2, 3, 8).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.log_evidence, b.log_evidence);
        assert!(bpf_sample(&model, &lik, 1, 3, 8).is_err());
    }

    #[test]
    fn non_factorizing_observation_is_rejected() {
        let obs = ObservationProcess::new(ObservationOperator::SpatialAverage, 3, 2, vec![1.0; 3], vec![0.0; 3]).unwrap();
        assert!(StepLikelihood::new(&obs, None).is_err());
    }

    #[test]
    fn impossible_observation_collapses() {
        let model = LinearGaussianSsm::scalar(0.9, 0.1, 0.0, 1.0).unwrap();
        let lik = StepLikelihood::new(&scalar_obs(vec![0.0, 1e200], 1e-300), None).unwrap();
        match bpf_sample(&model, &lik, 16, 1, 0) {
            Err(Error::ParticleCollapse { step }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn standardized_observation_coordinates() {
        let obs = ObservationProcess::new(ObservationOperator::Identity, 1, 3, vec![1.0; 3], vec![0.0; 3]).unwrap();
        let tf = Standardization { means: vec![1.0, 2.0, 3.0], stds: vec![2.0, 2.0, 2.0] };
        let lik = StepLikelihood::new(&obs, Some(&tf)).unwrap();
        let base = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lik.log_likelihood(0, &[1.0, 2.0, 3.0]) - base).abs() < 1e-14);
        assert!((lik.log_likelihood(0, &[3.0, 2.0, 3.0]) - (base - 0.5)).abs() < 1e-14);
    }
}
