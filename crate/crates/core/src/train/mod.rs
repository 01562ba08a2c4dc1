//! Training loop, optimizer, loss, metrics and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Mode, TrainConfig};
pub use loss::{hybrid_loss, record_hybrid_loss};
pub use metrics::{evaluate_metrics, ClassCounts, Metrics};
pub use optim::{adam_step, update_alpha, AdamState};
pub use trainer::{
    initial_model, log_to_csv, train, train_with_progress, write_log_csv, EpochLog, TrainOutcome,
};
