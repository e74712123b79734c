//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op}: shape {shape:?} incompatible with {detail}")]
    BadShape {
        op: &'static str,
        shape: [usize; 2],
        detail: String,
    },
    #[error("{op}: parameter out of range: {detail}")]
    BadParameter { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("non-finite values produced by op `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("finite-difference check invalidated: {0}")]
    CheckInvalidated(String),
}

/// Errors raised while ingesting or generating trajectory data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: malformed record: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("{path}: agent {agent}: frames not strictly increasing at line {line}")]
    NonMonotoneFrames {
        path: String,
        agent: i64,
        line: usize,
    },
    #[error("invalid scenario: {0}")]
    BadScenario(String),
    #[error("leave-one-out split needs at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Errors raised by model construction and training.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("mode contract violated: {0}")]
    ModeContract(String),
    #[error("training aborted: non-finite loss at epoch {epoch}, first produced by op `{op}`")]
    NonFiniteLoss { epoch: usize, op: String },
    #[error("empty training set")]
    EmptyTrainSet,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised while saving or loading checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("parameter `{name}`: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: [usize; 2],
        found: [usize; 2],
    },
    #[error("parameter `{name}` present in checkpoint but not in model")]
    UnknownParameter { name: String },
    #[error("parameter `{name}` missing from checkpoint")]
    MissingParameter { name: String },
    #[error("checkpoint truncated: expected {expected} bytes in {section}, got {found}")]
    Truncated {
        section: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Top-level error for library consumers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
