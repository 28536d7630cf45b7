//! Experiment harness: configs, the parallel run grid, and CSV outputs.

pub mod config;
pub mod grid;
pub mod output;

pub use config::{make_env, Algorithm, ExperimentConfig, ExperimentKind, PerLambda};
pub use grid::{cells, run_audits, run_experiment, run_grid, Cell, RunOptions};
pub use output::{summarize, RunRecord, SummaryRow};
