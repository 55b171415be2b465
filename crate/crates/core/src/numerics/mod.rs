//! Dense `f64` tensors, reverse-mode differentiation, Adam, and parameter
//! checkpoints.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry};
pub use graph::{Graph, Var, MASKED_LOGIT};
pub use params::{xavier_uniform, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{len} values do not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} has too few dimensions")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: range start {start} len {len} invalid for shape {shape:?}")]
    Range {
        op: &'static str,
        start: usize,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any differentiable leaf")]
    Detached,
    #[error("backward already ran on this graph")]
    AlreadyDifferentiated,
    #[error("tensor has no gradient buffer")]
    NoGradient,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
