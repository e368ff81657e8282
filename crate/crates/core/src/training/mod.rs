//! Bidirectional training.

pub mod loss;
pub mod optim;
pub mod recompute;
pub mod trainer;

pub use loss::{AuxTargets, LossBreakdown, LossWeights, Pass, SeqBatch};
pub use optim::{Adam, AdamConfig, Schedule};
pub use recompute::recompute_grads;
pub use trainer::{compute_grads, DevMetrics, TrainConfig, TrainOutcome, Trainer};
