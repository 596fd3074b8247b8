//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LisaError {
    #[error("node index {index} out of bounds for graph with {num_nodes} nodes")]
    IndexOutOfBounds { index: usize, num_nodes: usize },
    #[error("weights for edge ({u},{v}) are asymmetric: {w_uv} vs {w_vu}")]
    AsymmetricWeights { u: usize, v: usize, w_uv: f64, w_vu: f64 },
    #[error("duplicate undirected edge ({u},{v})")]
    DuplicateEdge { u: usize, v: usize },
    #[error("mask length mismatch: expected {expected}, got {got} ({what})")]
    MaskLengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("cannot batch an empty list of graphs")]
    EmptyBatch,
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: &'static str, detail: String },
    #[error("non-finite activation in {context}")]
    NonFiniteActivation { context: &'static str },
    #[error("non-finite gradient: {detail}")]
    NonFiniteGradient { detail: String },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("at least one environment is required")]
    EmptyEnvironments,
    #[error("length mismatch: {left} vs {right} ({what})")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("diversity needs at least 2 environments, got {got}")]
    TooFewEnvironments { got: usize },
    #[error("domain error: {what} = {value} outside {domain}")]
    DomainError { what: &'static str, value: f64, domain: &'static str },
    #[error("configuration error: {0}")]
    ConfigError(String),
    #[error("data error: {0}")]
    DataError(String),
    #[error("parse error at line {line}: {detail}")]
    ParseError { line: usize, detail: String },
    #[error("manifest index {index} beyond record count {count}")]
    ManifestOutOfRange { index: usize, count: usize },
    #[error("empty split: {split}")]
    EmptySplit { split: &'static str },
    #[error("metrics log schema mismatch: field `{field}` ({detail})")]
    SchemaMismatch { field: String, detail: String },
    #[error("ROC-AUC undefined: labels contain a single class")]
    SingleClassAuc,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LisaError>;
