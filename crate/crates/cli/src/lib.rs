//! Command implementations behind the `dgan` binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error.

pub mod commands;
pub mod records;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] dgan::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
            CliError::Core(e) => match e {
                dgan::Error::Config(_) | dgan::Error::DegenerateSpec(_) => 2,
                _ => 1,
            },
        }
    }

    /// Prefix the message, keeping the exit code.
    pub fn context(self, what: &str) -> Self {
        let code = self.exit_code();
        let msg = format!("{what}: {self}");
        if code == 2 {
            CliError::Usage(msg)
        } else {
            CliError::Runtime(msg)
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
