//! Differentiable primitives, each recorded on a [`Tape`](crate::Tape) with its
//! backward rule.

mod conv;
mod dropout;
mod elementwise;
mod linalg;
mod norm;
mod pool;
mod reduce;
mod shape;
mod softmax;

pub use conv::ConvGeometry;
pub use norm::moments;
pub use pool::{max_pool2d_forward, Window};
