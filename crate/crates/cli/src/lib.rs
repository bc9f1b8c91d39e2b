//! Experiment orchestration for few-shot block grafting: configuration,
//! checkpoints, metrics, the staged pipeline, reports and plots.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod verify;

pub use config::ExperimentConfig;
pub use manifest::RunManifest;
pub use pipeline::{run_pipeline, Step};
