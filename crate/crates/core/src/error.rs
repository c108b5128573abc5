//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor operations and the gradient tape.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("{op}: degenerate input ({details})")]
    DegenerateInput { op: &'static str, details: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Errors raised while building prompts from a vocabulary.
#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token {token:?} does not belong to attribute group {group:?}")]
    WrongGroup { token: String, group: String },
    #[error("duplicate attribute group {0:?}")]
    DuplicateGroup(String),
    #[error("phrase of {got} tokens exceeds the configured token budget {max}")]
    PhraseTooLong { got: usize, max: usize },
}

/// Errors raised by benchmark generation.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid composition space: {0}")]
    InvalidSpace(String),
    #[error("atom coverage unsatisfiable after {0} attempts")]
    CoverageUnsatisfiable(usize),
    #[error("instance placement failed after exhausting retries (seed {seed})")]
    PlacementFailed { seed: u64 },
}

/// Errors raised by the evaluation protocol.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask dimension mismatch: {0}x{1} vs {2}x{3}")]
    MaskDims(usize, usize, usize, usize),
    #[error("AND-efficiency undefined: weakest attribute-group AP is zero")]
    UndefinedAndEfficiency,
    #[error("missing evaluation split {0:?}")]
    MissingSplit(String),
}

/// Errors raised when reading or writing on-disk formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("corrupt {what}: {details}")]
    Corrupt { what: &'static str, details: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Top-level error for library entry points that cross module boundaries.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
