//! Losses, optimizer, augmentation, checkpoints, and the training loop.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use config::TrainConfig;
pub use loss::{BootstrapConfig, LossWeights};
pub use optim::OptimState;
pub use trainer::{train, StepStats, TrainOutcome, Trainer};
