use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed record line: {0}")]
    MalformedLine(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("invalid value for `{field}`: {reason}")]
    InvalidValue { field: String, reason: String },
    #[error("store unavailable at {path}: {source}")]
    StoreUnavailable {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("empty input")]
    EmptyInput,
    #[error("unterminated string literal starting at byte {0}")]
    UnterminatedString(usize),

    #[error("query {0} has no tokens")]
    EmptyQuery(usize),
    #[error("embedder error: {0}")]
    Embedder(String),

    #[error("feature stats do not match the encoding layout: {0}")]
    StatsMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("query sequence is empty")]
    EmptySequence,
    #[error("context not present in prefix tree")]
    UnknownContext,
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dependency {from} -> {to} creates a cycle")]
    CycleDetected { from: usize, to: usize },
    #[error("dependency {from} -> {to} out of range for pattern of length {len}")]
    IndexOutOfRange { from: usize, to: usize, len: usize },
    #[error("dependency {from} -> {to} points backwards in pattern order")]
    OrderViolation { from: usize, to: usize },
    #[error("missing or non-positive response time for node {0}")]
    MissingRt(usize),

    #[error("corrupt state file {0}")]
    CorruptState(String),
    #[error("unsupported format version {found} (supported up to {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} not found; run the corresponding step first")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
