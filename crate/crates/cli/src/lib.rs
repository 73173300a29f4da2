//! Configuration, checkpoint container and subcommands behind the `ugsep` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Exit 2 for usage and configuration problems, 1 for everything else.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
    #[error(transparent)]
    Core(#[from] ugsep_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(ugsep_core::Error::Config(_)) => 2,
            CliError::Failure(_) | CliError::Core(_) => 1,
        }
    }
}
