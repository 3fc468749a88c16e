//! Gibbs sampler with MALA updates for the latent factors.

pub mod chain;
pub mod config;
pub mod data;
pub mod state;
pub mod steps;

pub use chain::{run_chain, run_chain_with, sweep, ChainOptions, ChainOutput, StepAdapter, SweepContext};
pub use config::{DlPsiUpdate, Hyperparams, ResponseModel};
pub use data::{CellStatus, Dataset};
pub use state::ModelState;
