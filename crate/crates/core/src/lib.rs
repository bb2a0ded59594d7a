//! Class-imbalance-aware nodule candidate classification: cascaded
//! single-sided classifiers, a fusion meta-classifier over per-model
//! probabilities, and FROC evaluation.

pub mod cascade;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod seed;

pub use error::{Error, Result};
