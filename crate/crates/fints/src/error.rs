//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FintsError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("layer {layer} out of range for model with {n_layers} layers")]
    InvalidLayer { layer: usize, n_layers: usize },

    #[error("invalid injection payload: {0}")]
    InvalidPayload(String),

    #[error("key_dim {0} is below the minimum of 16")]
    KeyDimTooSmall(usize),

    #[error("unknown user '{0}'")]
    UnknownUser(String),

    #[error("no other users with train records to sample from")]
    NoComplementPool,

    #[error("corpus line {line}: {msg}")]
    CorpusParse { line: usize, msg: String },

    #[error("corpus line {line}: duplicate record (user '{user}', ts {ts}, same query)")]
    DuplicateRecord { line: usize, user: String, ts: i64 },

    #[error("user '{0}' has no train records")]
    EmptyUser(String),

    #[error("steering dict is empty")]
    EmptyDict,

    #[error("empty selection passed to aggregation")]
    EmptySelection,

    #[error("empty validation set")]
    EmptyValidation,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("file truncated in header")]
    TruncatedHeader,

    #[error("file truncated while reading entry {entry} of {total}")]
    Truncated { entry: usize, total: usize },

    #[error("header field overflow: {0}")]
    HeaderOverflow(String),

    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSynthSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FintsError>;
