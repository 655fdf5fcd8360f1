//! Configuration-driven experiment runner for GODE-CF and LightGCN.

pub mod config;
pub mod error;
pub mod experiment;
pub mod sweep;

pub use config::{ExperimentConfig, ModelKind};
pub use error::CliError;
pub use experiment::{evaluate_run, load_dataset, prepare_data, run_experiment, run_labeled, RunSummary};
pub use sweep::{emit_sweep_table, run_sweep, SweepRow};

/// Environment variable that relative output directories are resolved
/// against.
pub const OUTPUT_ROOT_ENV: &str = "GODE_CF_OUTPUT_ROOT";
