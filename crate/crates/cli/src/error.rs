use std::path::{Path, PathBuf};

use dmlkit_core::{Error, TensorError};
use thiserror::Error as ThisError;

/// Failures of a command, each mapped to one process exit code.
#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("gradient check failed for {0}")]
    Gradcheck(String),
}

impl CliError {
    pub fn config(field: &str, msg: &str) -> Self {
        CliError::Config(format!("invalid `{field}`: {msg}"))
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Converts a core error raised while touching `path`.
    pub fn at(path: &Path) -> impl Fn(Error) -> CliError + '_ {
        move |e| match e {
            Error::Io(source) | Error::Tensor(TensorError::Io(source)) => {
                CliError::io(path, source)
            }
            other => other.into(),
        }
    }

    /// 2 for config, data and shape errors, 3 for numeric failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Numeric(_) | CliError::Gradcheck(_) => 3,
            CliError::Io { .. } => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::UnknownLabel(_) => CliError::Config(e.to_string()),
            Error::NonFinite { .. }
            | Error::Tensor(TensorError::NonFinite { .. })
            | Error::Tensor(TensorError::NonPositiveLog(_)) => CliError::Numeric(e.to_string()),
            Error::Io(source) | Error::Tensor(TensorError::Io(source)) => CliError::Io {
                path: PathBuf::new(),
                source,
            },
            Error::Tensor(_) | Error::Data(_) | Error::Image(_) | Error::Json(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}
