//! Staged training: source tasks, weight transfer and triplet training.

pub mod ablation;
pub mod adam;
pub mod augment;
pub mod train;
pub mod triplets;

pub use adam::Adam;
pub use augment::{augment, AugmentParams};
pub use train::{train_task, EpochLog, Task, TaskModel, TrainConfig, TrainJob, TrainOutcome};
pub use triplets::TripletPool;
