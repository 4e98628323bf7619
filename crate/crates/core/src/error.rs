use thiserror::Error;

use crate::tensor::Shape4;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape4, rhs: Shape4 },
    #[error("{op}: output would have zero spatial size (input {input})")]
    EmptyOutput { op: &'static str, input: Shape4 },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("every pixel is ignored")]
    AllIgnored,
    #[error("invalid config field `{field}`: {msg}")]
    InvalidConfig { field: &'static str, msg: String },
    #[error("latency table has no entry for {0}")]
    MissingLatency(String),
    #[error("unsupported {kind} schema version {found} (expected {expected})")]
    SchemaVersion {
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("malformed {kind}: {msg}")]
    Malformed { kind: &'static str, msg: String },
    #[error("index {index} out of range for split of {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("timer resolution too coarse: {0}")]
    Timer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }
}
