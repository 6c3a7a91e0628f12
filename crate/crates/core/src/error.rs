use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape disagreement, e.g. inner dimensions of a matrix product.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity surfaced where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Input data failed validation (bad task label, duplicate id, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A line-oriented input file failed to parse.
    #[error("{path}:{line}: {msg}")]
    ParseLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Checkpoint manifest or blob is inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

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

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
