use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    ConfigLine {
        path: String,
        line: usize,
        message: String,
    },

    #[error("projection error: {0}")]
    Projection(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("crop error: {0}")]
    Crop(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error at byte offset {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line surface: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::ConfigLine { .. } => 1,
            Error::Training { .. } | Error::GradCheck(_) | Error::Fit(_) => 3,
            _ => 2,
        }
    }
}
