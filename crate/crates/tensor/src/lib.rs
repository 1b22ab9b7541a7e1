//! Dense-tensor compute backend with reverse-mode automatic differentiation.
//!
//! The operator set is exactly what the compression pipeline needs: 2-D
//! convolution (grouped, zero-padded, strided), batch normalization with
//! train/eval/recalibrate modes, ReLU, global average pooling, a linear head,
//! residual addition, softmax cross-entropy, row-wise cosine similarity, and
//! SGD/Adam updates with global-norm gradient clipping.
//!
//! Everything is generic over [`Element`] (`f32` or `f64`). Training runs in
//! `f32`; gradient checks run the same kernels in `f64`. All reductions use a
//! fixed summation order, so results are bit-identical across runs and thread
//! counts for a given build.

pub mod ops;
pub mod optim;
pub mod tape;
mod tensor;

pub use ops::{BnMode, Conv2dArgs, BN_EPS, BN_MOMENTUM, COSINE_NORM_FLOOR};
pub use optim::{optimizer_step, OptimKind, OptimizerState, StepReport};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::{DType, Element, Tensor};

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    /// Two shapes that must agree do not; `detail` names the offending
    /// dimension and both extents.
    #[error("{context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    /// An argument is out of its documented domain (zero extent, bad stride,
    /// group count that does not divide the channel count, ...).
    #[error("{context}: {detail}")]
    InvalidArg { context: String, detail: String },

    /// A gradient became NaN or infinite during an optimizer step.
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGrad { name: String },
}

impl TensorError {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch { context: context.into(), detail: detail.into() }
    }

    pub(crate) fn invalid(context: impl Into<String>, detail: impl Into<String>) -> Self {
        TensorError::InvalidArg { context: context.into(), detail: detail.into() }
    }
}
