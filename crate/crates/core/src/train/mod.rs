//! Optimization: MSE loss, Adam, per-epoch learning-rate decay and early stopping.

mod optim;
mod trainer;

pub use optim::{adam_step, clip_global_norm, early_stop_check, lr_schedule, AdamState};
pub use trainer::{
    load_examples, mse_loss, EpochRecord, Example, FitOutcome, LossKind, TrainConfig, TrainLog,
    Trainer, BEST_CHECKPOINT, RESUME_STATE, TRAIN_LOG,
};
