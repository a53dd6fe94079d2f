use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::frame::TimeSeriesFrame;
use crate::error::{Error, Result};

pub const FEATURE_NAMES: [&str; 7] = ["open", "high", "low", "close", "volume", "return", "volatility"];
pub const N_FEATURES: usize = 7;
pub const CLOSE: usize = 3;
pub const RETURN: usize = 5;
pub const VOLATILITY: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureOptions {
    /// `ln(C_t / C_{t-1})` instead of the simple return.
    pub log_return: bool,
    /// `ln(1 + V_t)` instead of raw volume.
    pub log_volume: bool,
}

/// One row per trading day after the first:
/// `[open, high, low, close, volume, return, volatility]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dates: Vec<NaiveDate>,
    pub rows: Vec<[f64; N_FEATURES]>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[c]).collect()
    }
}

/// Parkinson high-low volatility, `ln(H/L) / (2 sqrt(ln 2))`.
pub fn parkinson_volatility(high: f64, low: f64) -> Result<f64> {
    if !(high > 0.0 && low > 0.0) {
        return Err(Error::Config(format!(
            "volatility needs positive high/low, got {high}/{low}"
        )));
    }
    Ok((high / low).ln() / (2.0 * std::f64::consts::LN_2.sqrt()))
}

/// Builds the per-day feature vector. The first day has no return and is
/// dropped; every feature depends only on the current and previous day.
pub fn compute_features(frame: &TimeSeriesFrame, opts: FeatureOptions) -> Result<FeatureMatrix> {
    if frame.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "features need at least 2 rows, got {}",
            frame.len()
        )));
    }
    let mut rows = Vec::with_capacity(frame.len() - 1);
    for t in 1..frame.len() {
        let (prev, cur) = (frame.close[t - 1], frame.close[t]);
        if prev == 0.0 || (opts.log_return && (prev <= 0.0 || cur <= 0.0)) {
            return Err(Error::Config(format!(
                "return undefined at {}: previous close {prev}",
                frame.dates[t]
            )));
        }
        let ret = if opts.log_return {
            (cur / prev).ln()
        } else {
            (cur - prev) / prev
        };
        let volume = if opts.log_volume {
            frame.volume[t].ln_1p()
        } else {
            frame.volume[t]
        };
        rows.push([
            frame.open[t],
            frame.high[t],
            frame.low[t],
            cur,
            volume,
            ret,
            parkinson_volatility(frame.high[t], frame.low[t])?,
        ]);
    }
    Ok(FeatureMatrix {
        dates: frame.dates[1..].to_vec(),
        rows,
    })
}

/// Per-feature affine map of `[min, max]` onto `[0, 1]`. Values outside the
/// fitted range map outside `[0, 1]`; nothing is clipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(rows: &[[f64; N_FEATURES]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("scaler fit"));
        }
        let mut min = vec![f64::INFINITY; N_FEATURES];
        let mut max = vec![f64::NEG_INFINITY; N_FEATURES];
        for row in rows {
            for c in 0..N_FEATURES {
                min[c] = min[c].min(row[c]);
                max[c] = max[c].max(row[c]);
            }
        }
        Ok(Self { min, max })
    }

    /// Width of the fitted range; a degenerate column scales by 1.
    fn span(&self, c: usize) -> f64 {
        let s = self.max[c] - self.min[c];
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn scale_value(&self, c: usize, x: f64) -> f64 {
        (x - self.min[c]) / self.span(c)
    }

    pub fn unscale_value(&self, c: usize, x: f64) -> f64 {
        x * self.span(c) + self.min[c]
    }

    pub fn scale_row(&self, row: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|c| self.scale_value(c, row[c]))
    }

    pub fn scale_rows(&self, rows: &[[f64; N_FEATURES]]) -> Vec<[f64; N_FEATURES]> {
        rows.iter().map(|r| self.scale_row(r)).collect()
    }
}
