//! Score-based data assimilation for stochastic dynamical systems.
//!
//! A local score network is trained on short windows of trajectories and
//! composed into a score over arbitrarily long trajectories. Posterior
//! trajectories are then sampled for observation processes that were never
//! seen during training, by adding a likelihood score derived from Tweedie's
//! formula to the prior score and simulating the reverse diffusion.
//!
//! Reference machinery (bootstrap particle filter, Kalman smoother, analytic
//! Gaussian chains) lives next to the method so that every approximation can
//! be checked against an exact or asymptotically exact answer.

pub mod autodiff;
pub mod composition;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gaussian;
pub mod guidance;
pub mod io;
pub mod lorenz;
pub mod oracle;
pub mod rng;
pub mod sampling;
pub mod score;
pub mod scorenet;
pub mod training;

pub use composition::{compose_score, ComposedScore, LocalScore};
pub use diffusion::{DiffusionSchedule, PerturbedState};
pub use error::{Error, Result};
pub use evaluation::{PosteriorEnsemble, Provenance};
pub use gaussian::GaussianChainSpec;
pub use guidance::{
    GammaMatrix, Guidance, LikelihoodCovariance, LikelihoodVariant, ObservationOperator,
    ObservationProcess,
};
pub use lorenz::{LorenzModel, LorenzParams, Split, Standardization, TrajectoryStore};
pub use sampling::SamplerConfig;
pub use score::{GaussianScore, ScoreFn, ScoreVjp};
pub use scorenet::{NetworkConfig, NetworkScore, OptimizerState, Parameters};
pub use training::{TrainConfig, TrainOutcome};
