//! Scheduled drift/MSE training, the flow-matching training loop, optimizer
//! and checkpoints.

mod checkpoint;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{config_hash, Checkpoint, MAGIC, VERSION};
pub use loss::{drift_loss, mse_loss, pair_demos, total_loss};
pub use optim::{AdamW, OptimizerConfig};
pub use schedule::{schedule_weights, ScheduleConfig};
pub use trainer::{epoch_rng, EpochMetrics, Method, Model, TrainConfig, TrainState, Trainer, NAIVE_TEMPERATURE};
