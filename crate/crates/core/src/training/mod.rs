//! Self-distillation loss, the mixed token-length step, its replica-parallel
//! twin, and the epoch loop.

mod loss;
mod parallel;
mod plan;
mod step;
mod trainer;

pub use loss::distillation_loss;
pub use parallel::{parallel_train_step, Replicas};
pub use plan::{DistillConfig, DistillHead, LrSchedule, TrainPlan};
pub use step::{accumulate_gradients, dropout_rng, mixed_token_train_step, StepStats};
pub use trainer::{epoch_order, train, trainer_optimizer, LogRow, TrainLog, TRAIN_LOG_HEADER};
