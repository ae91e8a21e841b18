//! Library side of the `enginefault` command: configuration handling and the
//! subcommand implementations, kept here so they can be driven from tests.

pub mod commands;
pub mod config;

use thiserror::Error;

pub use config::{load_config, validate_config, Overrides, RunConfig};

/// Exit code for usage and configuration errors.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for failures while running a command.
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "ENGINEFAULT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] enginefault::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(enginefault::Error::Config { .. }) => EXIT_USAGE,
            CliError::Core(_) | CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
