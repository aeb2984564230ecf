//! Few-shot domain adaptive detection tooling: class-balancing cut-paste
//! augmentation, multi-level instance alignment losses with analytic
//! gradients, batch composition and detection metrics.

pub mod cbcp;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod features;
pub mod loss;
pub mod metrics;
pub mod schedule;
pub mod selftest;
pub mod synthetic;

pub use error::{Error, Result};
