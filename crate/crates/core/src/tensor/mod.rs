//! Dense tensors with reverse-mode differentiation.
//!
//! Values live in [`Array`]; [`Tensor`] wraps an array in a node of a dynamic
//! graph. The tape is built as operations run and released by
//! [`Tensor::backward`].

mod array;
pub mod checkpoint;
mod conv;
mod float;
mod graph;
mod loss;
mod norm;
mod ops;

use thiserror::Error;

pub use array::Array;
pub use conv::{conv2d, global_average_pool, max_pool2d, upsample_nearest2x};
pub use float::{gemm, Float};
pub use graph::Tensor;
pub use loss::{focal_loss, focal_term, smooth_l1, FocalParams};
pub use norm::{batch_norm, dropout, Mode, RunningStats};
pub use ops::{add, add_n, concat_batch, grad_reverse, linear, mean, mul, relu, scale, sigmoid, sum, GradReverse};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward requires a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("batch norm evaluated before any running-statistics update")]
    UninitializedStatistics,
}
