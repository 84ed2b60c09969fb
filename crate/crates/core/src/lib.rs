//! Long-term treatment effects and incremental remaining lifetime value from
//! short staggered-entry A/B tests.
//!
//! The pipeline is: aggregate user-day logs into a cohort panel
//! ([`panel`]), estimate the treatment trajectory over exposure time
//! ([`estimators`]), fit an exponential decay ([`decay`]) and combine the
//! fits into decision metrics ([`metrics`]). [`simulate`] and [`bench`]
//! provide synthetic data with known ground truth and the Monte Carlo
//! comparison harness.

pub mod bench;
pub mod cli;
pub mod decay;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod metrics;
pub mod panel;
pub mod simulate;

pub use error::{Error, Result};
