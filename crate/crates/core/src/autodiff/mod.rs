//! Small deterministic numeric engine: dense tensors, a define-by-run graph with
//! reverse-mode gradients, named parameters, AdamW and checkpoints.

mod checkpoint;
mod gemm;
mod graph;
mod optim;
mod params;
mod tensor;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, AdamWConfig, Moments, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::{broadcast_shape, Tensor};

pub(crate) use graph::logsumexp_slice;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("zero-norm row in {op}")]
    ZeroVector { op: &'static str },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
}
