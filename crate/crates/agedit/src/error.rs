use std::path::{Path, PathBuf};

/// Failures of the command-line layer, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] agedit_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// 2 for invocation and configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type AppResult<T> = std::result::Result<T, AppError>;
