use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("rerun mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } | CliError::Mismatch(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attributes a library error that arose while reading `path`.
    pub fn reading(path: &Path, e: replaylens::Error) -> Self {
        match e {
            replaylens::Error::Io(source) => CliError::io(path, source),
            other => CliError::Data(format!("{}: {other}", path.display())),
        }
    }
}

impl From<replaylens::Error> for CliError {
    fn from(e: replaylens::Error) -> Self {
        use replaylens::Error as E;
        match e {
            E::NonFinite { .. } | E::Training { .. } => CliError::Numeric(e.to_string()),
            E::Format(_) | E::Io(_) => CliError::Data(e.to_string()),
            E::Shape { .. } | E::Contract(_) | E::Json(_) => CliError::Config(e.to_string()),
        }
    }
}
