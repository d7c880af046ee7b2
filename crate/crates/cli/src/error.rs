use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}:{line}: {msg}")]
    Config {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Malformed CSV input; `line` is 1-based and counts the header.
    #[error("{path}:{line}: malformed CSV: {msg}")]
    Csv {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("missing artifact {0}")]
    Missing(PathBuf),

    #[error(transparent)]
    Core(#[from] eaaw_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for usage and configuration problems, 2 for everything that went
    /// wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Core(eaaw_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}
