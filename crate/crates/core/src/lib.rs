//! Variational learning of Gaussian-process state-space models.
//!
//! The transition function of a nonlinear state-space model carries a
//! sparse GP prior summarized by inducing variables `u`. Learning alternates
//! particle smoothing of an auxiliary Markovian model with closed-form
//! natural-parameter updates of `q(u)` and gradient steps on the
//! hyperparameters. Predictions after training cost `O(M^2)` regardless of
//! the length of the training series.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the scalar to `f64`.

pub mod error;
pub mod eval;
pub mod kernel;
pub mod model;
pub mod scalar;
pub mod smoothing;
pub mod sparse;
pub mod training;

#[cfg(test)]
mod test_support;

pub use error::{GpssmError, Result};
pub use kernel::{robust_factor, KernelFamily, KernelSpec, MeanFunction, PsdMatrix};
pub use scalar::Real;

pub type Kernel = kernel::KernelSpec<f64>;
pub type Model = model::GpssmModel<f64>;
pub type Likelihood = model::LikelihoodSpec<f64>;
pub type Posterior = sparse::InducingPosterior<f64>;
pub type Stats = sparse::SufficientStats<f64>;
pub type Particles = smoothing::ParticleTrajectories<f64>;
pub type State = training::TrainingState<f64>;
pub type Trajectory = model::Trajectory<f64>;
