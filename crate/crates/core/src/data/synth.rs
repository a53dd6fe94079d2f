//! Synthetic OHLCV series with known injected anomalies.
//!
//! `close_t = level + slope * t + sum_j A_j sin(2 pi t / P_j + phi_j) + sigma * eps_t + spike_t`.
//! Exactly `round(rate * n)` positions receive an additive spike of fixed
//! magnitude and random sign. Open is the previous clean close, and the
//! high/low band always contains open and close.

use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use super::frame::TimeSeriesFrame;
use crate::error::{Error, Result};
use crate::numeric::RngState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Period in trading days.
    pub period: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub start_date: NaiveDate,
    pub level: f64,
    pub trend_slope: f64,
    pub sinusoids: Vec<Sinusoid>,
    pub noise_sigma: f64,
    /// Fraction of days carrying a spike.
    pub anomaly_rate: f64,
    /// Absolute spike size in price units.
    pub anomaly_magnitude: f64,
    /// Scale of the half-normal extension of high/low beyond open/close, at
    /// price `level`; it grows in proportion to the noiseless signal.
    pub intraday_range: f64,
    /// Slow multiplicative cycle on `intraday_range`: the scale at step `t`
    /// is `intraday_range * (1 + amplitude * sin(2 pi t / period + phase))`.
    /// Gives the volatility target something to learn; `amplitude = 0`
    /// disables it.
    pub range_cycle: Sinusoid,
    pub volume_base: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            start_date: NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date"),
            level: 100.0,
            trend_slope: 0.005,
            sinusoids: vec![
                Sinusoid {
                    amplitude: 6.0,
                    period: 64.0,
                    phase: 0.0,
                },
                Sinusoid {
                    amplitude: 3.0,
                    period: 16.0,
                    phase: 1.0,
                },
            ],
            noise_sigma: 0.5,
            anomaly_rate: 0.01,
            anomaly_magnitude: 3.0,
            intraday_range: 1.0,
            range_cycle: Sinusoid {
                amplitude: 0.8,
                period: 300.0,
                phase: std::f64::consts::PI,
            },
            volume_base: 1.0e6,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad("anomaly_rate must lie in [0, 1]");
        }
        if self.noise_sigma < 0.0 || self.intraday_range < 0.0 || self.anomaly_magnitude < 0.0 {
            return bad("noise, range and magnitude must be non-negative");
        }
        if !(0.0..1.0).contains(&self.range_cycle.amplitude) {
            return bad("range_cycle amplitude must lie in [0, 1)");
        }
        if self
            .sinusoids
            .iter()
            .chain([&self.range_cycle])
            .any(|s| !(s.period > 0.0))
        {
            return bad("sinusoid periods must be positive");
        }
        if self.volume_base <= 0.0 {
            return bad("volume_base must be positive");
        }
        Ok(())
    }

    pub fn anomaly_count(&self) -> usize {
        (self.anomaly_rate * self.n as f64).round() as usize
    }

    /// Intraday extension scale at step `t`.
    pub fn range_scale(&self, t: usize) -> f64 {
        let c = &self.range_cycle;
        let cycle = 1.0 + c.amplitude * (2.0 * std::f64::consts::PI * t as f64 / c.period + c.phase).sin();
        self.intraday_range * cycle * (self.signal(t) / self.level).abs()
    }

    /// Trend plus sinusoids at step `t`, without noise.
    pub fn signal(&self, t: usize) -> f64 {
        let tf = t as f64;
        self.level
            + self.trend_slope * tf
            + self
                .sinusoids
                .iter()
                .map(|s| s.amplitude * (2.0 * std::f64::consts::PI * tf / s.period + s.phase).sin())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub frame: TimeSeriesFrame,
    pub anomaly_mask: Vec<bool>,
    /// Gaussian noise added to each close, before spikes.
    pub noise: Vec<f64>,
    /// Signed spike added to each close (zero where no anomaly).
    pub spikes: Vec<f64>,
}

impl SyntheticSeries {
    pub fn write_truth_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "date,is_anomaly").map_err(|e| Error::io(path, e))?;
        for (d, &a) in self.frame.dates.iter().zip(&self.anomaly_mask) {
            writeln!(out, "{},{}", d.format("%Y-%m-%d"), u8::from(a)).map_err(|e| Error::io(path, e))?;
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Consecutive weekdays starting at (or after) `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SyntheticSeries> {
    cfg.validate()?;
    let n = cfg.n;
    let mut rng = RngState::new(cfg.seed);
    let noise: Vec<f64> = (0..n).map(|_| cfg.noise_sigma * rng.normal()).collect();

    // anomaly positions: exact count, never the first day
    let count = cfg.anomaly_count().min(n - 1);
    let mut candidates: Vec<usize> = (1..n).collect();
    rng.shuffle(&mut candidates);
    let mut spikes = vec![0.0; n];
    let mut mask = vec![false; n];
    for &t in &candidates[..count] {
        mask[t] = true;
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        spikes[t] = sign * cfg.anomaly_magnitude;
    }

    let clean: Vec<f64> = (0..n).map(|t| cfg.signal(t) + noise[t]).collect();
    let dates = business_days(cfg.start_date, n);
    let mut frame = TimeSeriesFrame::default();
    for t in 0..n {
        let close = clean[t] + spikes[t];
        let open = if t == 0 { clean[0] } else { clean[t - 1] };
        let r = cfg.range_scale(t);
        let high = open.max(close) + r * rng.normal().abs();
        let low = open.min(close) - r * rng.normal().abs();
        let volume = cfg.volume_base * (0.2 * rng.normal()).exp();
        frame.push(dates[t], [open, high, low, close, volume]);
    }
    if frame.low.iter().any(|&l| l <= 0.0) {
        return Err(Error::Config("synthetic prices reached zero; raise `level`".into()));
    }
    Ok(SyntheticSeries {
        frame,
        anomaly_mask: mask,
        noise,
        spikes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_close_is_exact_signal() {
        let cfg = SynthConfig {
            n: 300,
            noise_sigma: 0.0,
            anomaly_rate: 0.0,
            ..SynthConfig::default()
        };
        let s = synth_generate(&cfg).unwrap();
        for t in 0..cfg.n {
            assert_eq!(s.frame.close[t], cfg.signal(t));
        }
        s.frame.validate().unwrap();
    }

    #[test]
    fn seeded_and_exact_anomaly_count() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.anomaly_mask.iter().filter(|&&m| m).count(), 40);
        a.frame.validate().unwrap();
        let other = synth_generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.anomaly_mask, other.anomaly_mask);
    }

    #[test]
    fn dates_skip_weekends() {
        let d = business_days(NaiveDate::from_ymd_opt(2024, 1, 5).unwrap(), 3);
        assert_eq!(
            d,
            vec![
                NaiveDate::from_ymd_opt(2024, 1, 5).unwrap(),
                NaiveDate::from_ymd_opt(2024, 1, 8).unwrap(),
                NaiveDate::from_ymd_opt(2024, 1, 9).unwrap()
            ]
        );
    }

    #[test]
    fn invalid_config() {
        assert!(synth_generate(&SynthConfig {
            anomaly_rate: 1.5,
            ..SynthConfig::default()
        })
        .is_err());
        let mut cfg = SynthConfig::default();
        cfg.range_cycle.amplitude = 1.0;
        assert!(cfg.validate().is_err());
    }
}
