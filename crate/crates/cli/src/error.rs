use std::path::PathBuf;

use sparc_core::SparcError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// A configuration value is unknown, malformed or out of range.
    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A run directory or dataset file is missing pieces or malformed.
    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    /// A post-run self-check did not hold.
    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] SparcError),
}

impl CliError {
    pub(crate) fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for usage and configuration mistakes, 1 for
    /// everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Syntax { .. } | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
