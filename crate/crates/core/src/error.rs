use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("encoder cache does not match configuration: {0}")]
    CacheMismatch(String),

    #[error("unknown policy kind {kind:?}; supported kinds: {supported}")]
    UnknownPolicy { kind: String, supported: String },

    #[error("frame source failed: {0}")]
    FrameSource(String),

    #[error("timer too coarse: measured {measured_ns} ns against {granularity_ns} ns granularity, use larger sizes")]
    TimerResolution { measured_ns: u128, granularity_ns: u128 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
