//! Configuration, synthetic data and the staged training pipeline.

pub mod config;
mod error;
pub mod pipeline;
pub mod synth;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use pipeline::{run_pipeline, Pipeline, Stage};
