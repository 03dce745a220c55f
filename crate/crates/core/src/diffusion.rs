//! Variance-preserving diffusion with a cosine schedule.
//!
//! The perturbation kernel is `x(t) = μ(t)·x + σ(t)·ε` with
//! `μ(t) = cos(ωt)²`, `σ(t) = √(1 − μ(t)²)` and `ω = arccos √10⁻³`, so that
//! `μ(1) = 10⁻³`. Drift and diffusion coefficients are never needed
//! explicitly; every consumer works with `(μ, σ)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    VpCosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub omega: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::vp_cosine()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedState {
    pub value: Vec<f64>,
    pub t: f64,
}

impl DiffusionSchedule {
    /// Cosine schedule whose signal coefficient reaches 10⁻³ at `t = 1`.
    pub fn vp_cosine() -> Self {
        Self {
            kind: ScheduleKind::VpCosine,
            omega: 1e-3f64.sqrt().acos(),
        }
    }

    /// `(μ(t), σ(t))`, rejecting times outside `[0, 1]`.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok(self.coefficients_unchecked(t))
    }

    pub(crate) fn coefficients_unchecked(&self, t: f64) -> (f64, f64) {
        match self.kind {
            ScheduleKind::VpCosine => {
                let (s, c) = (self.omega * t).sin_cos();
                // 1 − cos⁴ = sin²·(1 + cos²), which avoids cancellation near t = 0.
                (c * c, s.abs() * (1.0 + c * c).sqrt())
            }
        }
    }

    pub fn mu(&self, t: f64) -> Result<f64> {
        self.coefficients(t).map(|(mu, _)| mu)
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.coefficients(t).map(|(_, sigma)| sigma)
    }

    /// Draws `x(t)` from the perturbation kernel given clean `x` and noise `eps`.
    pub fn perturb(&self, x: &[f64], t: f64, eps: &[f64]) -> Result<PerturbedState> {
        check_len(x.len(), eps.len())?;
        let (mu, sigma) = self.coefficients(t)?;
        let value = x
            .iter()
            .zip(eps)
            .map(|(&x, &e)| mu * x + sigma * e)
            .collect();
        Ok(PerturbedState { value, t })
    }
}
