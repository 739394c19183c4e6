//! Treatment-effect estimation for multivariate time series.
//!
//! The pipeline: [`timeseries`] ingests and windows a series, [`density`]
//! turns treatment and covariate history into balancing weights,
//! [`pom`] trains an LSTM potential-outcome model under those weights, and
//! [`inference`] compares factual with intervened predictions by MC dropout.
//! [`synthgen`] provides a synthetic system with known effects, [`metrics`]
//! scores estimates against it, and [`cli`] runs everything end to end.

// `!(x > 0.0)` style guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod density;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod neural;
pub mod parallel;
pub mod pom;
pub mod rng;
pub mod synthgen;
pub mod timeseries;

pub use error::{Error, Result};
