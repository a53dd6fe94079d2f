//! Decomposed frequency-attention forecasting with residual anomaly
//! detection and risk scoring for daily OHLCV series.

// `!(x > 0.0)` is how validation rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the formulas in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod anomaly;
pub mod attention;
pub mod config;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod risk;
pub mod training;

pub use error::{Error, Result};
