//! Unified loss, augmentation, optimizer, checkpoints and the training loop.

pub mod augment;
pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use augment::{mixclip_long, mixclip_plus_short};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{
    classify, compute_total_loss, LossTerms, LossWeights, MixedShortLabels, SupervisionTargets,
};
pub use optim::Adam;
pub use trainer::{
    prepare_batch, sample_gradients, thread_count, LossLog, LossValues, PreparedSample, Trainer,
    TrainingSet,
};
