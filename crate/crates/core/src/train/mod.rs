//! Training loop, checkpoints, embedding extraction and ablation runs.

mod ablate;
mod checkpoint;
mod config;
mod embed;
mod optim;
mod run;
mod sampler;

pub use ablate::{ablate, median, train_and_embed, variants, AblationRow, AblationTable, Axis, TrainedRun};
pub use checkpoint::{Checkpoint, RngState};
pub use config::{OptimConfig, RunConfig, Schedule};
pub use embed::{embed_samples, evaluate_embeddings, load_model};
pub use optim::AdamW;
pub use run::{prepare_batch, train_to_end, EpochLog, Trainer, CHECKPOINT_FILE, METRICS_FILE};
pub use sampler::PkSampler;
