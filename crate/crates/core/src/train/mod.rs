//! Losses, optimizers and the training loop.

pub mod losses;
pub mod optim;
pub mod trainer;

pub use losses::{bbox_mse, composite_detection_loss, cross_entropy, CompositeLossCfg, DetectionTarget, Targets};
pub use optim::{OptimKind, OptimState};
pub use trainer::{evaluate, train_epoch, Dataset, DetectionSummary, EpochStats, EvalReport, Evaluation, TrainOptions};
