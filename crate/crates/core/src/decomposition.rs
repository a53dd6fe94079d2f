//! Additive trend/seasonal split with a trailing moving average.
//!
//! `trend[t]` averages the `window` most recent values up to and including
//! `t`. Positions before the start of the series repeat the first value, so
//! the output has the input's length and never looks ahead. Noise is not
//! estimated separately; it stays in the seasonal part.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TREND_WINDOW: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub window: usize,
}

pub fn decompose(x: &[f64], window: usize) -> Result<DecompositionResult> {
    if x.is_empty() {
        return Err(Error::EmptyInput("decompose"));
    }
    if window == 0 {
        return Err(Error::Config("decomposition window must be at least 1".into()));
    }
    let trend = trailing_mean(x, window);
    let seasonal = x.iter().zip(&trend).map(|(v, t)| v - t).collect();
    Ok(DecompositionResult {
        trend,
        seasonal,
        window,
    })
}

/// Trailing mean with first-value padding. `window` must be positive.
pub(crate) fn trailing_mean(x: &[f64], window: usize) -> Vec<f64> {
    let inv = 1.0 / window as f64;
    (0..x.len())
        .map(|t| {
            let available = (t + 1).min(window);
            let head: f64 = x[t + 1 - available..=t].iter().sum();
            let padded = (window - available) as f64 * x[0];
            (head + padded) * inv
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_has_no_seasonal() {
        let d = decompose(&[5.0; 4], 3).unwrap();
        assert_eq!(d.trend, vec![5.0; 4]);
        assert_eq!(d.seasonal, vec![0.0; 4]);
    }

    #[test]
    fn unit_window_is_identity() {
        let x = [3.0, -1.0, 2.5];
        let d = decompose(&x, 1).unwrap();
        assert_eq!(d.trend, x.to_vec());
        assert_eq!(d.seasonal, vec![0.0; 3]);
    }

    #[test]
    fn ramp_with_window_two() {
        // (x0 + x0)/2, (x0 + x1)/2, (x1 + x2)/2, (x2 + x3)/2
        let d = decompose(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(d.trend, vec![1.0, 1.5, 2.5, 3.5]);
        assert_eq!(d.seasonal, vec![0.0, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn ramp_seasonal_is_constant_after_warmup() {
        let x: Vec<f64> = (0..50).map(|t| 0.3 * t as f64 - 2.0).collect();
        let w = 7;
        let d = decompose(&x, w).unwrap();
        // trailing mean of a ramp lags by (w-1)/2 steps
        for t in w - 1..x.len() {
            assert!((d.seasonal[t] - 0.3 * (w - 1) as f64 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_period_average_cancels_sinusoid() {
        let p = 12;
        let x: Vec<f64> = (0..100)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / p as f64).sin())
            .collect();
        let d = decompose(&x, p).unwrap();
        for t in p - 1..x.len() {
            assert!(d.trend[t].abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(decompose(&[], 3).is_err());
        assert!(decompose(&[1.0], 0).is_err());
    }
}
