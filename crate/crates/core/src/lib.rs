//! Prompt adapters for a frozen hierarchical image encoder.
//!
//! The crate covers the whole pipeline: guidance extraction
//! ([`guidance`]), per-stage prompt generation ([`adapter`]), the frozen
//! encoder and tunable mask decoder ([`backbone`]), training objectives
//! ([`losses`]), the evaluation metrics ([`metrics`]), dataset ingestion
//! ([`data`]) and the optimization loop ([`trainer`]).

pub mod adapter;
pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod guidance;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
mod task;
pub mod trainer;

pub use error::{Error, Result};
pub use task::Task;
