//! Command-line wiring for the unida pipeline.

pub mod commands;
pub mod config;
pub mod model;

use thiserror::Error;

/// Exit-code taxonomy: usage/config errors exit 2, runtime failures exit 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}
