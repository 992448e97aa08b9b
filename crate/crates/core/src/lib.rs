//! Uncertainty-aware remaining-useful-life estimation for turbofan fleets.
//!
//! The crate covers the full pipeline: CMAPSS-format ingestion
//! ([`cmapss`]), condition-aware preprocessing ([`prep`]), window/sample
//! construction ([`dataset`]), a reverse-mode autodiff engine
//! ([`autodiff`]), the hierarchical probabilistic model ([`model`]),
//! heteroscedastic training ([`train`]) and the evaluation/reporting suite
//! ([`eval`]). A synthetic degradation generator ([`simulate`]) supports
//! tests and demos without the real datasets.

pub mod autodiff;
pub mod cmapss;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod prep;
pub mod rng;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
