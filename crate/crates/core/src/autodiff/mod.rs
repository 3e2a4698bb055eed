//! Reverse-mode automatic differentiation over NCHW tensors.
//!
//! Every operation records its parents and a backward closure on the output
//! [`Tensor`]. [`Tensor::backward`] walks the recorded DAG in reverse
//! topological order from a scalar loss and accumulates gradients into the
//! leaves that require them. Operations whose inputs do not require
//! gradients record nothing, so inference builds no graph.
//!
//! The engine is generic over [`Element`] so the same kernels run in `f32`
//! for training and `f64` for gradient checking.

mod conv;
mod elementwise;
mod gemm;
mod norm;
mod tensor;

pub use conv::{conv2d, conv_transpose2d, conv_output_extent, conv_transpose_output_extent, ConvSpec};
pub use elementwise::{
    add, clamp, concat_channels, mean, mul, relu, scale, sigmoid, slice_channels, sum, tanh,
};
pub use gemm::Element;
pub use norm::{batch_norm2d, BatchNormState, BN_EPSILON, BN_MOMENTUM};
pub use tensor::{checked_mode, set_checked_mode, Backward, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("batch norm in training mode needs more than one value per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;
