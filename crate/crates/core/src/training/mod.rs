//! Behavior-cloning training, batching and checkpoints.

mod batch;
mod checkpoint;
mod train;

pub use batch::{action_chunks, all_indices, make_batch, sample_indices, Batch};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_expecting, parse_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use train::{bc_train, bc_train_with, code_agreement, Phase, Progress, TrainConfig, TrainOutcome};
