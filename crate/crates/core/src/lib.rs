//! Occluded person re-identification with pose-guided part tokens,
//! intra-part attention inside the feature map and inter-part transformers
//! over stripe, patch and keypoint tokens.

pub mod check;
pub mod error;
pub mod model;
pub mod nn;
pub mod parts;
pub mod pose;
pub mod retrieval;
pub mod synth;
pub mod train;

pub use error::{PirtError, Result};
