//! Parameterized layers and the per-pass context they run in.

mod attention;
mod ctx;
mod layers;
mod params;

pub use attention::{Ffn, HeadParams, Mhsa, TransformerStack, TransformerUnit};
pub use ctx::{Forward, Gradients};
pub use layers::{BatchNorm, Conv2d, InstanceNorm, LayerNorm, Linear, NORM_EPS, NORM_MOMENTUM};
pub use params::{ParamEntry, ParamId, ParamStore};
