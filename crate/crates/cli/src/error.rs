use std::path::{Path, PathBuf};

use gdr_core::GdrError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },
    #[error(transparent)]
    Runtime(#[from] GdrError),
    #[error("{0}")]
    Service(#[from] gdr_service::ServiceError),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) | CliError::Service(_) => 1,
            CliError::Usage(_) => 2,
            CliError::File { .. } => 3,
            CliError::CheckFailed(_) => 4,
        }
    }

    pub fn file(path: &Path, msg: impl ToString) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    /// Spec validation failures are the caller's flags being wrong.
    pub fn from_validation(e: GdrError) -> Self {
        match e {
            GdrError::InvalidSpec(m) | GdrError::InvalidSchedule(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
