use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence too short: length {len} must exceed lag {lag}")]
    SequenceTooShort { len: usize, lag: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("path enumeration refused: {paths} paths exceed the limit of {limit}")]
    TooManyPaths { paths: u128, limit: u128 },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("rank-deficient regression: {0}")]
    RankDeficient(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
