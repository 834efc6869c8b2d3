//! The network: backbone, intra-part module, partitions, inter-part
//! transformers, confidence scoring, embedding necks and losses.

mod blocks;
mod config;
mod loss;
mod partition;
mod pirt;

pub use blocks::{apply_confidence, Backbone, Csm, Irm, CONFIDENCE_EPS};
pub use config::ModelConfig;
pub use loss::{cross_entropy, hard_triplet, l2_normalize, mine_hard_pairs, pairwise_distances, DIST_EPS};
pub use partition::{partition, patch_tokens, pose_tokens, stripe_tokens, PATCH_WINDOW};
pub use pirt::{LossTerms, ModelInput, ModelOutput, Pirt, PoseOutput};
