//! Proximal policy optimization with programmed rewards, plus a supervised
//! next-token baseline.

mod config;
pub mod losses;
mod rollout;
mod supervised;
mod trainer;

pub use config::{derive_seed, PPOConfig};
pub use losses::{
    composite_loss, gather_rows, loss_batch_entropy, loss_clip, loss_entropy, loss_kl, loss_value,
    LossInputs, LossTerms, PolicyRows,
};
pub use rollout::{
    collect_rollouts, compute_advantages, rollouts_for, whiten, RolloutBatch, RolloutSequence,
    RolloutStats,
};
pub use supervised::{
    evaluate_loss, generate_dataset, supervised_loss, supervised_step, SupervisedConfig,
    SupervisedTrainer,
};
pub use trainer::{ppo_record, train_step, LossBreakdown, PpoTrainer, Record};
