//! Command implementations behind the `softmoa` binary.
//!
//! Every command takes a resolved [`config::RunConfig`], writes its CSVs under
//! the configured output directory and returns a typed report so the same
//! code can be driven in-process.

pub mod commands;
pub mod config;
pub mod report;

use std::fmt;

pub use config::{ConfigError, Overrides, RunConfig};

/// Command failure, split the way exit codes are.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or inputs: exit code 2.
    Config(String),
    /// Non-finite values, failed gradient checks, violated invariants: exit code 1.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<softmoa::Error> for CliError {
    fn from(e: softmoa::Error) -> Self {
        match e {
            softmoa::Error::Numeric { .. } | softmoa::Error::Contract(_) => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o error: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
