use std::io;
use std::path::{Path, PathBuf};

/// Errors of the command-line layer. Each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: byte {offset}: {message}", path.display())]
    Checkpoint {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: hran_core::Error,
    },
    #[error(transparent)]
    Core(#[from] hran_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) | CliError::InFile { source: e, .. } if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn checkpoint(path: &Path, offset: u64, message: impl Into<String>) -> Self {
        CliError::Checkpoint {
            path: path.to_path_buf(),
            offset,
            message: message.into(),
        }
    }

    pub fn in_file(path: &Path, source: hran_core::Error) -> Self {
        CliError::InFile {
            path: path.to_path_buf(),
            source,
        }
    }
}
