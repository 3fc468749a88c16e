//! Bayesian latent factor regression with quadratic and polynomial terms in
//! the factors, used to estimate main effects and interactions among
//! correlated predictors.

pub mod distributions;
pub mod error;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod simulation;
pub mod stats;

pub use error::{FinError, Result};
