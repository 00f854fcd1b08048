use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::FormatError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] tcsm_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },

    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    /// 0 success, 1 usage/config, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigLine { .. } | CliError::Config(_) => 1,
            CliError::Core(e) if e.is_numeric() => 2,
            CliError::Core(_) => 1,
            CliError::Io { .. } | CliError::Format { .. } | CliError::Csv { .. } => 3,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
        move |source| CliError::Csv {
            path: path.to_path_buf(),
            source,
        }
    }
}
