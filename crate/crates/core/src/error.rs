use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Provider,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero vector (norm below 1e-12)")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("partition references layer {layer} but the stack has {num_layers} layers")]
    PartitionOutOfRange { layer: usize, num_layers: usize },

    #[error("prompt template {kind} is missing slot `{slot}`")]
    MissingSlot { kind: &'static str, slot: &'static str },
    #[error("no fixture response for prompt: {0}")]
    FixtureMiss(String),
    #[error("LLM request timed out or endpoint unreachable: {0}")]
    HttpTimeout(String),
    #[error("LLM endpoint returned HTTP {status}: {body}")]
    HttpBadStatus { status: u16, body: String },
    #[error("malformed LLM response: {0}")]
    MalformedResponse(String),
    #[error("description not present in embedding table: {0}")]
    UnknownDescription(String),
    #[error("class `{class}` at depth {depth}: {source}")]
    Build {
        class: String,
        depth: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid K={k} for {points} points")]
    BadK { k: usize, points: usize },
    #[error("hierarchy has no classes")]
    EmptyHierarchy,

    #[error("invalid box [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),
    #[error("unknown category {0}")]
    UnknownCategory(usize),
    #[error("cost matrix contains a non-finite entry")]
    NonFiniteCost,
    #[error("gamma must exceed 1, got {0}")]
    BadGamma(f64),
    #[error("box score must lie in [0, 1], got {0}")]
    BadScore(f64),
    #[error("no category has ground truth")]
    EmptyGroundTruth,
    #[error("invalid setting: {0}")]
    InvalidSetting(String),

    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::FixtureMiss(_)
            | Error::HttpTimeout(_)
            | Error::HttpBadStatus { .. }
            | Error::MalformedResponse(_) => ErrorClass::Provider,
            Error::Build { source, .. } => source.class(),
            Error::InvalidSigma(_)
            | Error::InvalidPartition(_)
            | Error::BadGamma(_)
            | Error::InvalidSetting(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// The innermost error, looking through build context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Build { source, .. } => source.root(),
            other => other,
        }
    }
}
