use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad or missing command-line input; exit code 2.
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    /// A file whose contents could not be decoded.
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A bad row in a CSV input; `line` is 1-based and counts the header.
    #[error("{path}:{line}: {detail}")]
    Row { path: PathBuf, line: u64, detail: String },

    #[error("{path}: not a checkpoint (bad magic {found:?})")]
    BadMagic { path: PathBuf, found: Vec<u8> },

    #[error("{path}: checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: checkpoint truncated while reading {what}")]
    Truncated { path: PathBuf, what: String },

    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },

    #[error(transparent)]
    Core(#[from] deepmil::Error),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
