use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite value in {0}")]
    Poisoned(String),

    #[error("graph input `{0}` is not bound")]
    Unbound(String),

    #[error("unknown graph input `{0}`")]
    UnknownInput(String),

    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("graph has no output node")]
    NoOutput,

    #[error("invalid class index {label} for {num_classes} classes")]
    InvalidLabel { label: f64, num_classes: usize },

    #[error(
        "layer dimension chain broken between layer {left} (outputs {out_dim}) and layer {right} (expects {in_dim})"
    )]
    DimensionChain {
        left: usize,
        right: usize,
        out_dim: usize,
        in_dim: usize,
    },

    #[error("invalid layer {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },

    #[error("checkpoint magic mismatch: found {found:02x?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("IDX magic mismatch in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero gradient: {0}")]
    ZeroGradient(&'static str),

    #[error("eigen-solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("DeepFool did not flip the label within {iterations} iterations")]
    DeepFoolNoConvergence {
        iterations: usize,
        partial: crate::tensor::Tensor,
    },

    #[error("quadratic model is infeasible: {0}")]
    Infeasible(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged {
        epoch: usize,
        loss: f64,
        history: Box<crate::cure::TrainingHistory>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
