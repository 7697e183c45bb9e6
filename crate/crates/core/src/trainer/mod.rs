//! Data loading, the training loop and evaluation.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod sweep;
pub mod train;

pub use config::{Profile, TrainConfig};
pub use dataset::{augment, load_dataset, synthetic_dataset, synthetic_image, DatasetHandle, ImageRecord};
pub use evaluate::{aggregate, evaluate, evaluate_with_baseline, mean_ci95, write_metrics_csv, EvalReport, EvalRow};
pub use train::{train, write_epoch_log, EpochRow, PlateauScheduler, TrainOutcome};
pub use sweep::{rd_sweep, SweepPoint};
