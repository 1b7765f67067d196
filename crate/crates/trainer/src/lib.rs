//! Desk-scale driver around `lowbit-core`: a small pre-norm transformer trained on
//! synthetic data, a JSONL telemetry trace, kernel micro-benchmarks and spike analysis.

pub mod analyze;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod task;
pub mod trace;
pub mod train;

pub use config::Config;
pub use error::{TrainerError, TrainerResult};
pub use train::{train, train_with_hook, TrainOutcome};
