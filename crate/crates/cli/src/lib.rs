//! Command-line runner for sparkdqn: configuration files, checkpoints,
//! metrics output and the four subcommands.

pub mod checkpoint;
pub mod config;
pub mod run;

pub use config::{parse_config, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Core(#[from] sparkdqn::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for runtime faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Core(sparkdqn::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}
