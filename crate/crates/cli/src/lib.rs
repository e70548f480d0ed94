//! Command line wiring for the surgphase pipeline: configuration loading,
//! stage orchestration and run manifests.

pub mod cli;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use cli::{exit_code, run};
pub use config::PipelineConfig;
