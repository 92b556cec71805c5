//! Dense tensors, reverse-mode differentiation, AdamW and the cosine
//! learning-rate schedule. Everything is `f64`.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, FORMAT_VERSION as CHECKPOINT_VERSION};
pub use graph::{gelu, sigmoid, signed_log, FlopCounter, GeluKind, Gradients, Graph, KeySets, Var};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use params::{GradBuffer, Init, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range (len {len})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
