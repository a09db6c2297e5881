//! End-to-end experiment pipeline: train every method on every data
//! realization, fit the hierarchical comparison models, and emit analysis
//! tables and figures under a run directory named by the config hash.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::{DatasetSpec, ExperimentConfig};
pub use pipeline::{Run, RunSummary};
