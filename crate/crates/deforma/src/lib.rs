//! Late meta-learning forecast fusion for M4-style time series.
//!
//! The crate combines a pool of classical base forecasters (SES, Holt,
//! damped Holt, Comb, Theta, Naive2) with learned fusion weights. The
//! main fusion model is a constrained-convolution 1D ResNet that maps a
//! raw (zero-padded) series to softmax weights over the pool, trained
//! against per-series OWA contributions of each learner. Baselines
//! (simple averaging, a feature-based MLP weigher, a per-series oracle),
//! the M4 metric suite (sMAPE / MASE / OWA) and a Schulze-ranked
//! cross-validation harness round out the toolkit.

pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod fusion;
pub mod harness;
pub mod learners;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rank;

pub use error::{Error, Result};
