//! Command-line experiments: training runs, penalty-weight sweeps,
//! correlation reports and feature-map dumps.

pub mod cli;
pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod feature_dump;
pub mod output;
pub mod pgm;

pub use cli::{run, run_from, Cli};
pub use error::CliError;
