//! Losses, the learning-rate schedule, AdamW and the stage drivers.
//!
//! Every driver runs the same loop: a per-epoch seeded permutation of the
//! samples, one graph per sample, gradients averaged over the batch, one
//! optimizer step, one [`LossRecord`] per step. Checkpoints carry the
//! optimizer moments and loop position, so a resumed run replays the
//! remaining steps bitwise.

mod log;
mod loss;
mod optim;
mod plan;
mod schedule;
mod search;
mod stages;

pub use log::{LossLog, LossRecord};
pub use loss::{cross_entropy, layer_mse, mse_value, soft_target_loss};
pub use optim::{AdamW, OptimConfig};
pub use plan::{ScheduleConfig, SoftTarget, Stage, TrainPlan};
pub use schedule::LrSchedule;
pub use search::{hyperparam_search, select_cell, SearchCell, SearchReport};
pub use stages::{
    ce_finetune, joint_knowledge_transfer, joint_objective, layer_val_mse, pkt_mask, pretrain,
    progressive_knowledge_transfer, Activations, LoopReport, Progress, RunControl, StageReport,
    THREADS_ENV,
};

pub(crate) use stages::par_map;
