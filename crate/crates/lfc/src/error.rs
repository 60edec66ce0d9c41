use std::io;
use std::path::PathBuf;

use crate::pgm::PgmError;

/// Every failure of a command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    Input { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Pgm { path: PathBuf, source: PgmError },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("output directory {0} exists and is not empty (use --force to overwrite)")]
    Conflict(PathBuf),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(lfc_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input { .. } | CliError::Pgm { .. } | CliError::Format { .. } => 2,
            CliError::Conflict(_) | CliError::Output { .. } => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(e) => match e {
                lfc_core::Error::Diverged(_) => 4,
                _ => 2,
            },
        }
    }

    pub fn input(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Input { path, source }
    }

    pub fn output(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Output { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> CliError {
        CliError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl From<lfc_core::Error> for CliError {
    fn from(e: lfc_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
