//! Core algorithms for benchmarking the reliability of uncertainty metrics
//! under data scarcity.

pub mod analysis;
pub mod datagen;
pub mod error;
pub mod hier;
pub mod manifest;
pub mod methods;
pub mod nn;
pub mod rng;
pub mod scoring;
pub mod stats;
pub mod table;
pub mod types;

pub use error::{Error, Result};
pub use rng::{RngStream, SeedMode};
pub use table::{CellKey, CoveredCount, MetricKey, MetricTable};
pub use types::{MethodId, MetricId};
