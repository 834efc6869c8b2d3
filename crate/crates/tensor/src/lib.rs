//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Values are row-major [`Tensor`]s. A [`Tape`] records each operation of one
//! forward pass together with its backward rule; [`Tape::backward`] replays the
//! record in reverse from a scalar loss. Images and feature maps are laid out
//! NHWC throughout.

mod error;
mod gradcheck;
pub mod ops;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, probe_coords, relative_error, GradCheck, GradReport};
pub use ops::{moments, ConvGeometry, Window};
pub use real::{cst, Real};
pub use tape::{BackwardArgs, BackwardFn, Mode, Tape, Var};
pub use tensor::{split_axis, strides_of, Tensor};
