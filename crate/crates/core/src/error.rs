use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("site \"{site}\" has no {arm} records")]
    MissingArm { site: String, arm: &'static str },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter outside its domain: {0}")]
    Domain(String),

    /// Internal: Cholesky pivot failure at this column.
    #[error("matrix is singular at column {column}")]
    Singular { column: usize },

    #[error("design is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("world specification error: {0}")]
    Specification(String),

    #[error("checkpoint for cell {cell} is unusable: {message}")]
    Checkpoint { cell: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
