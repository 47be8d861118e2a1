//! Loss, optimization and the training loop.

pub mod config;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use config::{Config, TrainConfig};
pub use loss::cross_entropy;
pub use metrics::{MetricsLine, MetricsLog};
pub use optim::{add_weight_decay, clip_gradients, global_norm, OptAlgo, Optimizer};
pub use trainer::{
    corpus_norm_stats, latest_checkpoint, Phase, StepStats, TrainOutcome, Trainer,
};
