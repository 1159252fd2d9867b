//! Dense tensors, a reverse-mode tape, finite-difference gradient checks and
//! checkpoint serialization.

mod checkpoint;
mod gradcheck;
mod linalg;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, ParamMap, CHECKPOINT_SCHEMA_VERSION};
pub use gradcheck::{grad_check, grad_check_many};
pub use linalg::spectral_norm;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

/// Negative-side slope used by every leaky-relu in the engine.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    TapeMismatch,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("serialization: {0}")]
    Serde(String),
}
