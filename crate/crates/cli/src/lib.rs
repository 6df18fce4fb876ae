//! Experiment runner: configuration, execution and persisted outputs.

pub mod commands;
pub mod config;
pub mod output;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(e: impl std::fmt::Display) -> Self {
        Self::Config(e.to_string())
    }

    /// Process exit code: 1 for configuration errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl From<ruby_qsl::Error> for CliError {
    fn from(e: ruby_qsl::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

/// Attach the failing stage to a core error.
pub(crate) trait StageContext<T> {
    fn stage(self, name: &str) -> Result<T, CliError>;
}

impl<T, E: std::fmt::Display> StageContext<T> for Result<T, E> {
    fn stage(self, name: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(format!("{name}: {e}")))
    }
}
