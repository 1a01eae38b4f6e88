//! Loss, optimizer, schedule, checkpoints and the training loop.

pub mod checkpoint;
pub mod evaluate;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use evaluate::evaluate;
pub use loss::{multi_task_loss, LossBreakdown, LossWeights};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::ScheduleSpec;
pub use trainer::{ClassWeighting, LogRecord, LogWriter, TrainConfig, Trainer, LOG_HEADER};
