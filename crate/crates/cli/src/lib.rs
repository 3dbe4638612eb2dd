//! Experiment runner for dual teacher-student training: layered configs,
//! per-seed run directories, sweeps and CSV reports.

pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod runner;

pub use config::{load, DataSource, ExperimentConfig, Override, Preset};
pub use error::{CliError, CliResult};
pub use manifest::{RunEntry, RunManifest, RunStatus};
pub use report::{emit_report, Report};
pub use runner::{run_experiment, sweep, RunSummary, OUT_DIR_ENV};
