//! Experiment runner: configuration, commands and their output files.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
