//! Generator-side machinery: residual correction, training objectives, dataset
//! preparation and the joint training loop.

mod config;
mod data;
mod losses;
mod train;

pub use config::{TrainConfig, TrainMode};
pub use data::{class_counts, oversample, oversample_counts, split_by_question};
pub use losses::{
    correct, dg_loss, generator_objective, lvlm_loss, reg_loss, total_loss, Correction,
    LossComponents, LossWeights, SampleObjective,
};
pub use train::{
    mean_delta_norm, train_mhsa, write_train_log, TrainLogRow, TrainOutcome, TRAIN_LOG_HEADER,
};
