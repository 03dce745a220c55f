//! Scores of perturbed distributions over flat batches of samples.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::diffusion::DiffusionSchedule;
use crate::error::{check_len, Error, Result};

/// `∇ log p(x(t))` evaluated on a batch of consecutive samples.
pub trait ScoreFn: Sync {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// A score that also provides `(∂score/∂x)ᵀ · cotangent`.
pub trait ScoreVjp: ScoreFn {
    fn vjp(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Result<Vec<f64>>;
}

impl<S: ScoreFn + ?Sized> ScoreFn for &S {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).score(x, t)
    }
}

impl<S: ScoreVjp + ?Sized> ScoreVjp for &S {
    fn vjp(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        (**self).vjp(x, t, cotangent)
    }
}

#[derive(Clone, Debug)]
enum Spectrum {
    Diagonal(Vec<f64>),
    Dense {
        vectors: DMatrix<f64>,
        values: DVector<f64>,
    },
}

/// Exact score of `N(m, Σ)` pushed through the perturbation kernel,
/// i.e. of `N(μ(t)·m, μ(t)²·Σ + σ(t)²·I)`.
#[derive(Clone, Debug)]
pub struct GaussianScore {
    mean: Vec<f64>,
    spectrum: Spectrum,
    schedule: DiffusionSchedule,
}

impl GaussianScore {
    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        check_len(mean.len(), variances.len())?;
        if variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::NotPositiveDefinite(
                "negative or NaN variance".into(),
            ));
        }
        Ok(Self {
            mean,
            spectrum: Spectrum::Diagonal(variances),
            schedule: DiffusionSchedule::vp_cosine(),
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self::diagonal(vec![0.0; dim], vec![1.0; dim]).expect("valid by construction")
    }

    pub fn dense(mean: Vec<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::ShapeMismatch {
                expected: d * d,
                got: cov.len(),
            });
        }
        let eig = SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.iter().any(|v| *v < -1e-12) {
            return Err(Error::NotPositiveDefinite(
                "prior covariance has a negative eigenvalue".into(),
            ));
        }
        Ok(Self {
            mean,
            spectrum: Spectrum::Dense {
                vectors: eig.eigenvectors,
                values: eig.eigenvalues.map(|v| v.max(0.0)),
            },
            schedule: DiffusionSchedule::vp_cosine(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Applies `−(μ²Σ + σ²I)⁻¹` to every `dim`-sized block of `v`.
    fn apply_neg_precision(&self, v: &mut [f64], t: f64) -> Result<()> {
        let d = self.dim();
        if d == 0 || !v.len().is_multiple_of(d) {
            return Err(Error::ShapeMismatch {
                expected: d,
                got: v.len(),
            });
        }
        let (mu, sigma) = self.schedule.coefficients(t)?;
        let (m2, s2) = (mu * mu, sigma * sigma);
        match &self.spectrum {
            Spectrum::Diagonal(var) => {
                for block in v.chunks_mut(d) {
                    for (x, var) in block.iter_mut().zip(var) {
                        *x = -*x / (m2 * var + s2);
                    }
                }
            }
            Spectrum::Dense { vectors, values } => {
                for block in v.chunks_mut(d) {
                    let x = DVector::from_column_slice(block);
                    let mut c = vectors.tr_mul(&x);
                    for (ci, l) in c.iter_mut().zip(values.iter()) {
                        *ci /= m2 * l + s2;
                    }
                    let y = vectors * c;
                    for (b, yi) in block.iter_mut().zip(y.iter()) {
                        *b = -yi;
                    }
                }
            }
        }
        Ok(())
    }
}

impl ScoreFn for GaussianScore {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = self.dim();
        let mu = self.schedule.mu(t)?;
        let mut v: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, xi)| xi - mu * self.mean[i % d])
            .collect();
        self.apply_neg_precision(&mut v, t)?;
        Ok(v)
    }
}

impl ScoreVjp for GaussianScore {
    fn vjp(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        check_len(x.len(), cotangent.len())?;
        let mut v = cotangent.to_vec();
        self.apply_neg_precision(&mut v, t)?;
        Ok(v)
    }
}
