//! Library side of the `ngrammer` binary: run configuration and subcommands.

pub mod commands;
pub mod config;

use std::path::Path;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(ngrammer::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    /// Process exit status: 2 for configuration problems, 3 for numeric
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(ngrammer::Error::Config(_)) => 2,
            CliError::Numeric(_) | CliError::Core(ngrammer::Error::Numeric(_)) => 3,
            _ => 1,
        }
    }
}

impl From<ngrammer::Error> for CliError {
    fn from(e: ngrammer::Error) -> Self {
        CliError::Core(e)
    }
}
