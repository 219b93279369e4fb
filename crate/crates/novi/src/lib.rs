//! Adversarially trained deep Gaussian processes with a neural sampler.
//!
//! A neural generator produces inducing-variable samples, a neural
//! discriminator estimates a regularized Stein discrepancy against the model
//! posterior, and stochastic optimization trains both together with the GP
//! hyperparameters. The crate also ships closed-form single-layer oracles
//! used to verify the stochastic machinery, plus dataset and checkpoint
//! plumbing for the regression benchmark harness.

pub mod autodiff;
pub mod dgp;
pub mod error;
pub mod kernel;
pub mod nets;
pub mod oracle;
pub mod rng;
pub mod stein;
pub mod tensor;

pub use error::{NoviError, Result};
pub use tensor::{cholesky, tri_solve, CholeskyFactor, Side, Tensor};
