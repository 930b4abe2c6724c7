use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, found {found}")]
    Dimension { op: &'static str, axis: String, expected: usize, found: usize },

    #[error("batchnorm evaluated before any training step populated running statistics")]
    UninitializedStatistics,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension { op, axis: axis.into(), expected, found }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
