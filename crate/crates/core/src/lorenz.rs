//! Stochastic Lorenz 1963 system: `x_{i+1} = M(x_i) + η`, `η ~ N(0, Δ·I)`,
//! where `M` integrates the Lorenz equations over `Δ` time units with
//! classical fourth-order Runge-Kutta.

use std::ops::Range;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::rng::{self, Rng};

pub const STATE_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    /// Time between two recorded states; also the transition noise variance.
    pub dt: f64,
    /// Runge-Kutta substeps per transition.
    pub substeps: usize,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.025,
            substeps: 5,
        }
    }
}

/// Right-hand side of the Lorenz equations with the classical parameters.
pub fn lorenz_drift(state: [f64; 3]) -> [f64; 3] {
    drift(&LorenzParams::default(), state)
}

fn drift(p: &LorenzParams, [a, b, c]: [f64; 3]) -> [f64; 3] {
    [p.sigma * (b - a), a * (p.rho - c) - b, a * b - p.beta * c]
}

fn axpy(x: [f64; 3], h: f64, k: [f64; 3]) -> [f64; 3] {
    [x[0] + h * k[0], x[1] + h * k[1], x[2] + h * k[2]]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LorenzModel {
    pub params: LorenzParams,
}

impl LorenzModel {
    pub fn new(params: LorenzParams) -> Result<Self> {
        if !(params.dt > 0.0) || params.substeps == 0 {
            return Err(Error::InvalidConfig(
                "Lorenz step must be positive with at least one substep".into(),
            ));
        }
        Ok(Self { params })
    }

    /// Deterministic part `M(x)`.
    pub fn flow(&self, x: [f64; 3]) -> [f64; 3] {
        self.flow_with_substeps(x, self.params.substeps)
    }

    pub fn flow_with_substeps(&self, mut x: [f64; 3], substeps: usize) -> [f64; 3] {
        let p = &self.params;
        let h = p.dt / substeps as f64;
        for _ in 0..substeps {
            let k1 = drift(p, x);
            let k2 = drift(p, axpy(x, h / 2.0, k1));
            let k3 = drift(p, axpy(x, h / 2.0, k2));
            let k4 = drift(p, axpy(x, h, k3));
            for d in 0..3 {
                x[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
            }
        }
        x
    }

    /// `M(x) + noise·√Δ` for a given standard-normal `noise`.
    pub fn step_with_noise(&self, x: [f64; 3], noise: [f64; 3]) -> Result<[f64; 3]> {
        let m = self.flow(x);
        let s = self.params.dt.sqrt();
        let next = [m[0] + s * noise[0], m[1] + s * noise[1], m[2] + s * noise[2]];
        check_finite(&next, || "Lorenz transition".into())?;
        Ok(next)
    }

    pub fn transition(&self, x: [f64; 3], rng: &mut Rng) -> Result<[f64; 3]> {
        let mut noise = [0.0; 3];
        rng::fill_normal(rng, &mut noise);
        self.step_with_noise(x, noise)
    }

    /// `log N(next; M(x), Δ·I)`, or `−∞` when the flow from `x` overflows.
    pub fn transition_log_density(&self, x: &[f64], next: &[f64]) -> f64 {
        let m = self.flow([x[0], x[1], x[2]]);
        let dt = self.params.dt;
        let quad: f64 = (0..3).map(|d| (next[d] - m[d]).powi(2)).sum();
        if quad.is_nan() {
            return f64::NEG_INFINITY;
        }
        -0.5 * quad / dt - 1.5 * (2.0 * std::f64::consts::PI * dt).ln()
    }

    /// A state from the attractor: a uniform draw over
    /// `[−20, 20] × [−20, 30] × [0, 50]` evolved for `burn_in` transitions.
    pub fn stationary_draw(&self, burn_in: usize, rng: &mut Rng) -> Result<[f64; 3]> {
        let mut x = [
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..30.0),
            rng.random_range(0.0..50.0),
        ];
        for _ in 0..burn_in {
            x = self.transition(x, rng)?;
        }
        Ok(x)
    }

    /// One trajectory of `len` states started from a fresh stationary draw.
    pub fn simulate(&self, len: usize, burn_in: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut states = Vec::with_capacity(len * STATE_DIM);
        let mut x = self.stationary_draw(burn_in, rng)?;
        for i in 0..len {
            if i > 0 {
                x = self.transition(x, rng)?;
            }
            states.extend_from_slice(&x);
        }
        Ok(states)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub eval: usize,
}

impl SplitCounts {
    /// 80/10/10 by whole trajectories.
    pub fn for_total(n: usize) -> Self {
        let train = ((n as f64) * 0.8).round() as usize;
        let valid = (((n as f64) * 0.1).round() as usize).min(n - train);
        Self {
            train,
            valid,
            eval: n - train - valid,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.valid + self.eval
    }
}

/// Per-channel affine map `standard = (raw − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            means: vec![0.0; dim],
            stds: vec![1.0; dim],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.means.iter().all(|m| *m == 0.0) && self.stds.iter().all(|s| *s == 1.0)
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn to_standard(&self, values: &mut [f64]) {
        let d = self.dim();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.means[i % d]) / self.stds[i % d];
        }
    }

    pub fn to_raw(&self, values: &mut [f64]) {
        let d = self.dim();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.stds[i % d] + self.means[i % d];
        }
    }
}

/// Trajectories of equal length, ordered train, then validation, then evaluation.
///
/// States are held in the coordinates given by `standardization`; the raw
/// value of a state is `standard·std + mean`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStore {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub splits: SplitCounts,
    pub standardization: Standardization,
}

impl TrajectoryStore {
    pub fn new(len: usize, dim: usize, data: Vec<f64>, splits: SplitCounts) -> Result<Self> {
        Self::with_standardization(len, dim, data, splits, Standardization::identity(dim))
    }

    pub fn with_standardization(
        len: usize,
        dim: usize,
        data: Vec<f64>,
        splits: SplitCounts,
        standardization: Standardization,
    ) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::InvalidConfig("trajectory length and dimension must be positive".into()));
        }
        if data.len() != splits.total() * len * dim {
            return Err(Error::ShapeMismatch {
                expected: splits.total() * len * dim,
                got: data.len(),
            });
        }
        if standardization.dim() != dim {
            return Err(Error::InvalidConfig("standardization dimension differs from state dimension".into()));
        }
        check_finite(&data, || "trajectory store".into())?;
        Ok(Self {
            len,
            dim,
            data,
            splits,
            standardization,
        })
    }

    pub fn n_traj(&self) -> usize {
        self.splits.total()
    }

    pub fn trajectory_size(&self) -> usize {
        self.len * self.dim
    }

    pub fn trajectory(&self, j: usize) -> &[f64] {
        let s = self.trajectory_size();
        &self.data[j * s..(j + 1) * s]
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        let c = self.splits;
        match split {
            Split::Train => 0..c.train,
            Split::Valid => c.train..c.train + c.valid,
            Split::Eval => c.train + c.valid..c.total(),
        }
    }

    pub fn split_data(&self, split: Split) -> &[f64] {
        let r = self.split_range(split);
        let s = self.trajectory_size();
        &self.data[r.start * s..r.end * s]
    }

    pub fn is_standardized(&self) -> bool {
        !self.standardization.is_identity()
    }

    /// The store in raw model coordinates.
    pub fn to_raw(&self) -> Self {
        let mut out = self.clone();
        self.standardization.to_raw(&mut out.data);
        out.standardization = Standardization::identity(self.dim);
        out
    }

    /// Truncates every trajectory to its first `len` states.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len {
            return Err(Error::InvalidConfig(format!(
                "cannot truncate trajectories of length {} to {len}",
                self.len
            )));
        }
        let s = self.trajectory_size();
        let data = (0..self.n_traj())
            .flat_map(|j| self.data[j * s..j * s + len * self.dim].iter().copied())
            .collect();
        Self::with_standardization(len, self.dim, data, self.splits, self.standardization.clone())
    }
}

/// Simulates `n_traj` independent trajectories, each on its own seeded stream.
pub fn generate_dataset(
    model: &LorenzModel,
    n_traj: usize,
    len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<TrajectoryStore> {
    if burn_in == 0 {
        return Err(Error::InvalidConfig("burn_in must be at least one step".into()));
    }
    if n_traj == 0 || len == 0 {
        return Err(Error::InvalidConfig("dataset must hold at least one state".into()));
    }
    let trajectories: Vec<Result<Vec<f64>>> = (0..n_traj)
        .into_par_iter()
        .map(|j| model.simulate(len, burn_in, &mut rng::stream(seed, j as u64)))
        .collect();
    let mut data = Vec::with_capacity(n_traj * len * STATE_DIM);
    for t in trajectories {
        data.extend(t?);
    }
    TrajectoryStore::new(len, STATE_DIM, data, SplitCounts::for_total(n_traj))
}

/// Standardizes every channel with the statistics of the training split.
pub fn standardize(store: &TrajectoryStore) -> Result<TrajectoryStore> {
    let raw = store.to_raw();
    let train = raw.split_data(Split::Train);
    if train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    let d = raw.dim;
    let count = (train.len() / d) as f64;
    let mut means = vec![0.0; d];
    for (i, v) in train.iter().enumerate() {
        means[i % d] += v;
    }
    means.iter_mut().for_each(|m| *m /= count);
    let mut vars = vec![0.0; d];
    for (i, v) in train.iter().enumerate() {
        vars[i % d] += (v - means[i % d]).powi(2);
    }
    let stds: Vec<f64> = vars.iter().map(|v| (v / count).sqrt()).collect();
    if let Some(c) = stds.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::InvalidConfig(format!("channel {c} has zero variance")));
    }
    let standardization = Standardization { means, stds };
    let mut out = raw;
    standardization.to_standard(&mut out.data);
    out.standardization = standardization;
    Ok(out)
}
