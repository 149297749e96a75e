//! Loss, optimizer, the staged training loop, checkpoints and learning-rate
//! search.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod search;
pub mod trainer;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{InitMode, Stage, TrainConfig};
pub use loss::{bce_loss, bce_value};
pub use search::{sample_learning_rates, search_learning_rate, SearchResult};
pub use trainer::{
    derive_seed, fit_batch, prepare_eval, prepare_image, run_stage, stage_examples, stage_spec, subsample_unimodal,
    train_model, train_step, EpochRecord, Pretrained, TrainOutcome,
};
