//! Parameter partitioning, focal loss and the bias-tuning loop.

pub mod focal;
pub mod optim;
pub mod partition;
pub mod train;

pub use focal::{focal_loss, focal_loss_grad, FocalLossConfig};
pub use optim::{AdamW, AdamWConfig};
pub use partition::{
    categorize, partition_parameters, Category, ParameterPartition, PartitionEntry,
};
pub use train::{fit, training_step, FitOutcome, PairStream, TrainConfig};
