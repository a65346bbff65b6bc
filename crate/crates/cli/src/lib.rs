//! Experiment runner for the sustain bilevel optimizer.
//!
//! [`grid::run_grid`] executes every (algorithm, seed) cell of an
//! [`ExperimentConfig`] in parallel and writes trajectory, summary and
//! curve CSVs. [`checks`] holds the self-check suites behind `sustain check`.

pub mod checks;
pub mod config;
pub mod error;
pub mod grid;
pub mod output;
pub mod problem;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use grid::{run_grid, GridReport};
