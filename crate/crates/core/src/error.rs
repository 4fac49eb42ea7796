use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("value length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op}: input outside the valid domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("zero-norm vector passed to cosine similarity")]
    ZeroNorm,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite loss (contrastive {contrastive}, reconstruction {reconstruction}, alignment {alignment}, tau {tau})")]
    NonFiniteLoss {
        contrastive: f64,
        reconstruction: f64,
        alignment: f64,
        tau: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
