use std::path::PathBuf;

/// Errors produced anywhere in the expansion pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate document id {0:?}")]
    DuplicateId(String),

    #[error("empty gold set for {0}")]
    EmptyGold(String),

    #[error("query {query}: unknown gold document id {doc:?}")]
    UnknownGold { query: String, doc: String },

    #[error("unknown document id {0:?}")]
    UnknownDoc(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("sequence of length {len} exceeds model maximum {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("shape mismatch for tensor {name}: expected {expected:?}, got {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    #[error("digest mismatch for {path}: expected {expected}, found {found}")]
    Digest {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
