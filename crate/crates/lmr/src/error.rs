use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic bytes (expected \"FMT1\")")]
    BadMagic { path: PathBuf },

    #[error("{path}: header declares {expected} payload bytes but {actual} are present")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path} line {line}: {msg}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate id `{id}` in {what}")]
    Duplicate { what: String, id: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("description coverage error: {0}")]
    Coverage(String),

    #[error("non-finite loss while training (qid `{qid}`)")]
    NonFiniteLoss { qid: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("attention maps were not recorded; run the forward pass with recording enabled")]
    AttentionNotRecorded,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
