//! Dataset generation and persistence, weight and payload file formats,
//! the training/evaluation loops and sweep driver for the recurrent CSI
//! feedback laboratory. The numerics live in `csi-core`.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod payload;
pub mod sweep;
pub mod train;
pub mod weights;

pub use config::RunConfig;
pub use dataset::{build_dataset, Dataset, DatasetMeta, GenerationConfig, SplitCounts};
pub use evaluate::{evaluate, EvalReport};
pub use train::{train_run, TrainError, TrainOutcome};
