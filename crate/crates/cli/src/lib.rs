//! Batch front end: CSV ingestion, configuration, `k` selection, chain
//! orchestration, posterior summaries and result files.

pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod fit;
pub mod simulate;

pub use config::{KChoice, RunConfig, SimulateConfig};
pub use data::{auto_select_k, load_dataset, KSelection, LoadedData};
pub use error::{exit_code, CliError};
pub use fit::{run, RunSummary};
