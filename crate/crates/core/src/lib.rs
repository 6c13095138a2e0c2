//! Benchmark harness for binary chest X-ray classification with transfer learning.
//!
//! The pipeline is: ingest image sources into a [`data::Manifest`], build the
//! three COVID-19-vs-other binary datasets, deal records into stratified
//! 5-fold assignments ([`split`]), fine-tune a backbone per fold
//! ([`train`]), then score predictions and pool folds ([`metrics`]).

pub mod config;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod split;
pub mod synth;
pub mod train;
mod types;

pub use error::{Error, Result};
pub use types::{Backbone, DatasetName, Label, Source};

/// Version string embedded into every emitted artifact.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
