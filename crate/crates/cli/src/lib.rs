//! Resumable command-line pipeline over `qappp-core`.

pub mod config;
pub mod pipeline;

pub use config::{Overrides, PipelineConfig};
pub use pipeline::{run_all, run_stage, Outcome, PipelineError, Stage};
