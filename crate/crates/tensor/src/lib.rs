//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! Values live in [`Tensor`]; differentiable computation goes through [`Var`]
//! handles recorded on a [`Tape`]. Everything is generic over [`Real`], so the
//! same code runs in `f32` for speed and `f64` for gradient audits.

mod error;
pub mod gradcheck;
pub mod ops;
mod real;
mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::Conv2dOptions;
pub use real::{gemm, MatView, Real};
pub use rng::{RngState, ALGORITHM as RNG_ALGORITHM};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{broadcast_shape, numel, split_at_axis, strides, Tensor};
