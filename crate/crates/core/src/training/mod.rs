//! REINFORCE training with a shared multi-start baseline and the
//! three-stage pipeline.

pub mod config;
pub mod metrics;
pub mod optimizer;
pub mod reinforce;
pub mod rollout;
pub mod stages;

pub use config::TrainConfig;
pub use metrics::{MetricsRecord, MetricsWriter};
pub use optimizer::Adam;
pub use reinforce::{advantage_weights, reinforce_step};
pub use rollout::{greedy_best, rollout, RolloutMode, RolloutRow, RolloutTrace};
pub use stages::{assemble_unified, finetune_expert, pretrain_backbone, train_unified};
