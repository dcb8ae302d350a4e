//! Masked-feature pre-training: masking, objective, optimizer, schedule,
//! checkpoints and the training loop.

mod checkpoint;
mod loss;
mod masking;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{pretrain_loss, PretrainLoss};
pub use masking::{apply_masking, MaskAction, MaskRecord, Masker, MaskingConfig, ReplacementPool};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use train::{
    derived_rng, pretrain, PretrainOptions, PretrainOutcome, StepLog, Stream, CHECKPOINT_FILE, LAST_GOOD_FILE,
    METRICS_FILE, RNG_SCHEME,
};
