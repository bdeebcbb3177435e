//! Error type shared across the simulator.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed interaction-log line; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("interaction log contains no records")]
    EmptyDataset,

    /// A user cannot be split leave-one-out (needs >= 2 positives).
    #[error("user {user} has {count} positive interaction(s); leave-one-out needs at least 2")]
    Split { user: u32, count: usize },

    /// Negative sampling cannot make progress (e.g. a user interacted with every item).
    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Non-finite value or arithmetic overflow where finiteness is an invariant.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index out of range: {what} {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed binary payload (table file, label wire, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Wraps a submodule error with where-it-happened context
    /// (e.g. "round 3, client 17").
    #[error("{context}: {source}")]
    WithContext {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn with_context(self, context: impl Into<String>) -> Error {
        Error::WithContext {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
