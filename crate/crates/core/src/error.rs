use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("utterance {id:?} has no tokens")]
    EmptyUtterance { id: String },
    #[error("utterance {id:?}: token {index} contains whitespace or is empty")]
    BadToken { id: String, index: usize },
    #[error("example {id:?}: span [{start}, {end}) out of range for {len} tokens")]
    SpanOutOfRange { id: String, start: usize, end: usize, len: usize },
    #[error("example {id:?}: span label is empty")]
    EmptyLabel { id: String },
    #[error("example {id:?}: spans [{a_start}, {a_end}) and [{b_start}, {b_end}) overlap")]
    OverlappingSpans { id: String, a_start: usize, a_end: usize, b_start: usize, b_end: usize },
    #[error("invalid span [{start}, {end}) for {len} tokens")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("label {label:?} has no instances")]
    EmptyLabelClass { label: String },
    #[error("max reduction needs at least 2 samples per label, got {per_class}")]
    EmptyReduction { per_class: usize },
    #[error("gold index {gold} out of range for {classes} classes")]
    GoldOutOfRange { gold: usize, classes: usize },
    #[error("non-finite value encountered: {what}")]
    NonFinite { what: String },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("support set is empty after filtering")]
    EmptySupport,
    #[error("task mismatch: expected {expected}, got {actual}")]
    TaskMismatch { expected: &'static str, actual: &'static str },
    #[error("brute-force decoding supports at most {limit} candidates, got {actual}")]
    TooManyCandidates { limit: usize, actual: usize },
    #[error("length mismatch: {gold} gold vs {pred} predicted")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("unknown gold label {label:?}")]
    UnknownLabel { label: String },
    #[error("labels cannot reach {k} instances: {labels:?}")]
    Unreachable { k: usize, labels: Vec<String> },
    #[error("insufficient data: {reason}")]
    InsufficientData { reason: String },
    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("prototype table is empty")]
    EmptyPrototypes,
}
