//! Posterior quality statistics: expected log-prior, expected log-likelihood
//! and the Wasserstein-1 distance between trajectory ensembles.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::guidance::ObservationProcess;
use crate::lorenz::Standardization;
use crate::oracle::StateSpaceModel;
use crate::rng;

/// Largest ensemble size accepted by [`wasserstein1`] unless a cap is given.
pub const DEFAULT_W1_CAP: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Sda,
    Bpf,
    Prior,
    Data,
}

/// `n` trajectories of `len × dim` states, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEnsemble {
    pub len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub provenance: Provenance,
    /// Snapshot of the configuration that produced the ensemble.
    pub config: serde_json::Value,
}

impl PosteriorEnsemble {
    pub fn new(len: usize, dim: usize, data: Vec<f64>, provenance: Provenance) -> Result<Self> {
        let size = len * dim;
        if size == 0 || data.is_empty() || !data.len().is_multiple_of(size) {
            return Err(Error::ShapeMismatch {
                expected: size.max(1),
                got: data.len(),
            });
        }
        Ok(Self {
            len,
            dim,
            data,
            provenance,
            config: serde_json::Value::Null,
        })
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.trajectory_size()
    }

    pub fn trajectory_size(&self) -> usize {
        self.len * self.dim
    }

    pub fn trajectories(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.trajectory_size())
    }

    /// `n` trajectories picked without replacement.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.n() || n == 0 {
            return Err(Error::InvalidConfig(format!(
                "cannot subsample {n} of {} trajectories",
                self.n()
            )));
        }
        let mut r = rng::stream(seed, 0);
        let mut picked = index::sample(&mut r, self.n(), n).into_vec();
        picked.sort_unstable();
        let size = self.trajectory_size();
        let data = picked
            .iter()
            .flat_map(|&j| self.data[j * size..(j + 1) * size].iter().copied())
            .collect();
        Ok(Self {
            data,
            ..self.clone()
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Mean over trajectories of `Σ_i log p(x_{i+1} | x_i)`.
///
/// `to_model` maps ensemble coordinates to model coordinates; pass `None`
/// when the ensemble is already in model coordinates.
pub fn expected_log_prior<M: StateSpaceModel + ?Sized>(
    ens: &PosteriorEnsemble,
    model: &M,
    to_model: Option<&Standardization>,
) -> Result<f64> {
    check_len(model.state_dim(), ens.dim)?;
    let dim = ens.dim;
    let totals: Vec<f64> = ens
        .data
        .par_chunks(ens.trajectory_size())
        .map(|traj| {
            let mut raw = traj.to_vec();
            if let Some(s) = to_model {
                s.to_raw(&mut raw);
            }
            raw.windows(2 * dim)
                .step_by(dim)
                .map(|w| model.transition_log_density(&w[..dim], &w[dim..]))
                .sum()
        })
        .collect();
    Ok(totals.iter().sum::<f64>() / totals.len() as f64)
}

/// Mean over trajectories of `log N(y; A(x), Σ_y)`.
pub fn expected_log_likelihood(ens: &PosteriorEnsemble, obs: &ObservationProcess) -> Result<f64> {
    check_len(obs.trajectory_size(), ens.trajectory_size())?;
    let values: Vec<Result<f64>> = ens
        .data
        .par_chunks(ens.trajectory_size())
        .map(|x| obs.log_likelihood(x))
        .collect();
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / ens.n() as f64)
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
///
/// Returns the column assigned to every row. Runs the shortest augmenting
/// path method with dual potentials in `O(n³)`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    check_len(n * n, cost.len())?;
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { what: "assignment cost".into() });
    }
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[(r - 1) * n + (j - 1)] - u[r] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = col0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Exact `W₁` between two equally sized ensembles under the Euclidean metric
/// on flattened trajectories.
pub fn wasserstein1(p: &PosteriorEnsemble, q: &PosteriorEnsemble) -> Result<f64> {
    wasserstein1_capped(p, q, DEFAULT_W1_CAP)
}

pub fn wasserstein1_capped(p: &PosteriorEnsemble, q: &PosteriorEnsemble, cap: usize) -> Result<f64> {
    if p.len != q.len || p.dim != q.dim {
        return Err(Error::ShapeMismatch {
            expected: p.trajectory_size(),
            got: q.trajectory_size(),
        });
    }
    let n = p.n();
    if q.n() != n {
        return Err(Error::InvalidConfig(format!(
            "W1 needs equal ensemble sizes, got {n} and {}; subsample the larger one",
            q.n()
        )));
    }
    if n > cap {
        return Err(Error::InvalidConfig(format!(
            "W1 is limited to {cap} trajectories per ensemble, got {n}; subsample first"
        )));
    }
    let size = p.trajectory_size();
    let cost: Vec<f64> = p
        .data
        .par_chunks(size)
        .flat_map_iter(|a| {
            q.data.chunks(size).map(move |b| {
                a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            })
        })
        .collect();
    let assignment = min_cost_assignment(&cost, n)?;
    Ok(assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum::<f64>()
        / n as f64)
}

/// Named statistics written as `stat,value` CSV and as JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub stats: Vec<(String, f64)>,
    /// Extra context such as config hashes and the coordinate system.
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl StatsReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.stats.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.stats.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stat,value\n");
        for (name, value) in &self.stats {
            out.push_str(&format!("{name},{value}\n"));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let stats: serde_json::Map<String, serde_json::Value> = self
            .stats
            .iter()
            .map(|(n, v)| (n.clone(), serde_json::json!(v)))
            .collect();
        serde_json::json!({ "stats": stats, "metadata": self.metadata })
    }
}
