//! Experiment driver: synthesis, training, evaluation, sweeps, benchmarks,
//! CKA and figures, all configured from one JSON file.

pub mod config;
pub mod pipeline;
pub mod plot;

use std::fmt;

pub use config::RunConfig;

/// Errors carry their exit code: 1 usage, 2 configuration, 3 runtime.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            // one line, causes joined
            CliError::Runtime(e) => write!(f, "runtime error: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<hyperspace::Error> for CliError {
    fn from(e: hyperspace::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
