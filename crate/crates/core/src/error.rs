use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {0} is outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("trajectory of length {len} is shorter than a window of radius {radius}")]
    TrajectoryTooShort { len: usize, radius: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("non-finite state at sampling step {step} (t = {t})")]
    NonFiniteState { step: usize, t: f64 },

    #[error("NaN training loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("particle collapse at step {step}: every weight underflowed")]
    ParticleCollapse { step: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by numerics rather than input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteState { .. }
                | Error::NanLoss { .. }
                | Error::ParticleCollapse { .. }
                | Error::NotPositiveDefinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, got })
    }
}

pub(crate) fn check_finite(values: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what() })
    }
}
