//! Commands of the `fairfader` binary: synthetic data generation, fader and
//! autoencoder training, latent classifiers, stratified evaluation and the
//! chained experiment.

pub mod commands;
pub mod config;
pub mod experiment;

use std::fmt;

pub use config::{DataSource, ExperimentConfig, SplitConfig};
pub use experiment::{run_experiment, ExperimentSummary};

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments or input artifacts (exit code 2).
    Config(String),
    /// Failure while doing the work (exit code 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub(crate) fn config(e: impl fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub(crate) fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;
