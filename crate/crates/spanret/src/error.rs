use std::path::{Path, PathBuf};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] spanret_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use spanret_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::InvalidConfig { .. }) => EXIT_USAGE,
            CliError::Core(E::Diverged { .. } | E::NonFinite { .. }) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), reason: reason.into() }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
