//! Command-line front end: config parsing and the `audit`, `train`, `eval`,
//! `grid` and `sample` commands.

pub mod commands;
pub mod config;

pub use commands::{CliError, CliResult};
pub use config::{ConfigError, ExperimentConfig};
