//! Residual-based anomaly detection and the latent KL regularizer.
//!
//! A step is anomalous when its absolute prediction error exceeds
//! `theta = mu_R + alpha * sigma_R`, with the residual mean and population
//! standard deviation taken either over the whole residual vector (global
//! mode) or over a trailing window ending at the step (rolling mode).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Var};

pub const DEFAULT_ALPHA: f64 = 2.5;
pub const DEFAULT_ROLLING_WINDOW: usize = 60;
pub const ALPHA_RANGE: (f64, f64) = (2.0, 3.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    #[default]
    Global,
    Rolling,
}

/// Where residual statistics are taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionMode {
    Global,
    /// Trailing window of the given length, inclusive of the current step.
    Rolling(usize),
}

impl DetectionMode {
    pub fn kind(self) -> ModeKind {
        match self {
            DetectionMode::Global => ModeKind::Global,
            DetectionMode::Rolling(_) => ModeKind::Rolling,
        }
    }
}

/// Which fitted value a residual compares the observation with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    /// First forecast step of the window ending the day before.
    #[default]
    OneStep,
    /// Last reconstructed step of the window ending on the day itself.
    Reconstruction,
}

/// Detector settings as they appear in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    pub alpha: f64,
    pub mode: ModeKind,
    pub rolling_window: usize,
    pub residual_source: ResidualSource,
    /// Accept `alpha` outside `[2, 3]`, emitting a warning instead of failing.
    pub allow_alpha_outside_range: bool,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            mode: ModeKind::Global,
            rolling_window: DEFAULT_ROLLING_WINDOW,
            residual_source: ResidualSource::OneStep,
            allow_alpha_outside_range: false,
        }
    }
}

impl AnomalyConfig {
    /// Validates the configuration, returning any warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        let mut warnings = Vec::new();
        if self.alpha < ALPHA_RANGE.0 || self.alpha > ALPHA_RANGE.1 {
            let msg = format!(
                "alpha {} lies outside the calibrated range [{}, {}]",
                self.alpha, ALPHA_RANGE.0, ALPHA_RANGE.1
            );
            if !self.allow_alpha_outside_range {
                return Err(Error::Config(msg));
            }
            warnings.push(msg);
        }
        if self.mode == ModeKind::Rolling && self.rolling_window == 0 {
            return Err(Error::Config("rolling window must be positive".into()));
        }
        Ok(warnings)
    }

    pub fn detection_mode(&self) -> DetectionMode {
        match self.mode {
            ModeKind::Global => DetectionMode::Global,
            ModeKind::Rolling => DetectionMode::Rolling(self.rolling_window),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    #[serde(rename = "mu_R")]
    pub mu_r: f64,
    #[serde(rename = "sigma_R")]
    pub sigma_r: f64,
    pub alpha: f64,
    pub theta: f64,
}

impl ThresholdStats {
    /// Mean and population standard deviation of `values`.
    pub fn from_residuals(values: &[f64], alpha: f64) -> Self {
        let n = values.len() as f64;
        let mut mu_r = values.iter().sum::<f64>() / n;
        // a second pass removes the rounding left in the naive mean
        mu_r += values.iter().map(|r| r - mu_r).sum::<f64>() / n;
        let var = values.iter().map(|r| (r - mu_r) * (r - mu_r)).sum::<f64>() / n;
        let sigma_r = var.sqrt();
        Self {
            mu_r,
            sigma_r,
            alpha,
            theta: mu_r + alpha * sigma_r,
        }
    }
}

/// Outcome of [`detect`]. In rolling mode `stats` summarizes the whole
/// vector and `thresholds` carries the per-step cut (`None` during warm-up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub alpha: f64,
    #[serde(rename = "mu_R")]
    pub mu_r: f64,
    #[serde(rename = "sigma_R")]
    pub sigma_r: f64,
    pub theta: f64,
    pub mode: ModeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<Option<f64>>>,
    pub flags: Vec<bool>,
    pub residuals: Vec<f64>,
    /// ISO dates aligned with `residuals`, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl AnomalyReport {
    pub fn stats(&self) -> ThresholdStats {
        ThresholdStats {
            mu_r: self.mu_r,
            sigma_r: self.sigma_r,
            alpha: self.alpha,
            theta: self.theta,
        }
    }

    pub fn flag_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn flag_rate(&self) -> f64 {
        self.flag_count() as f64 / self.flags.len().max(1) as f64
    }
}

/// Elementwise `|x - x_hat|`.
pub fn residuals(x: &[f64], x_hat: &[f64]) -> Result<Vec<f64>> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(
            "residuals",
            format!("{} observations vs {} fitted values", x.len(), x_hat.len()),
        ));
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b).abs()).collect())
}

pub fn detect(residuals: &[f64], alpha: f64, mode: DetectionMode) -> Result<AnomalyReport> {
    if residuals.is_empty() {
        return Err(Error::EmptyInput("detect"));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("residuals"));
    }
    let global = ThresholdStats::from_residuals(residuals, alpha);
    let (flags, window, thresholds) = match mode {
        DetectionMode::Global => (residuals.iter().map(|&r| r > global.theta).collect(), None, None),
        DetectionMode::Rolling(w) => {
            if w == 0 {
                return Err(Error::Config("rolling window must be positive".into()));
            }
            let mut flags = vec![false; residuals.len()];
            let mut thresholds = vec![None; residuals.len()];
            for t in w.saturating_sub(1)..residuals.len() {
                let stats = ThresholdStats::from_residuals(&residuals[t + 1 - w..=t], alpha);
                flags[t] = residuals[t] > stats.theta;
                thresholds[t] = Some(stats.theta);
            }
            (flags, Some(w), Some(thresholds))
        }
    };
    Ok(AnomalyReport {
        alpha,
        mu_r: global.mu_r,
        sigma_r: global.sigma_r,
        theta: global.theta,
        mode: mode.kind(),
        window,
        thresholds,
        flags,
        residuals: residuals.to_vec(),
        dates: None,
        warnings: Vec::new(),
    })
}

/// Mean over steps and latent dimensions of
/// `0.5 * (exp(logvar) + mu^2 - 1 - logvar)`, the closed-form KL divergence
/// of a diagonal Gaussian from the standard normal.
pub fn kl_regularizer(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::shape(
            "kl_regularizer",
            format!("{} means vs {} log-variances", mu.len(), logvar.len()),
        ));
    }
    if mu.is_empty() {
        return Err(Error::EmptyInput("kl_regularizer"));
    }
    if mu.iter().chain(logvar).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kl_regularizer"));
    }
    let total: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum();
    Ok(total / mu.len() as f64)
}

/// Graph version of [`kl_regularizer`].
pub fn kl_term(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let var = g.exp(logvar);
    let mu2 = g.square(mu);
    let s = g.add(var, mu2)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, -1.0);
    let m = g.mean(s);
    Ok(g.scale(m, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_examples() {
        assert_eq!(residuals(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(residuals(&[1.0, 2.0], &[2.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert!(residuals(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn equal_residuals_flag_nothing() {
        let r = detect(&[0.7; 10], 2.5, DetectionMode::Global).unwrap();
        assert_eq!(r.sigma_r, 0.0);
        assert!((r.theta - 0.7).abs() < 1e-15);
        assert_eq!(r.flag_count(), 0);
        let z = detect(&[0.0; 5], 2.0, DetectionMode::Global).unwrap();
        assert_eq!(z.theta, 0.0);
        assert_eq!(z.flag_count(), 0);
    }

    #[test]
    fn single_spike_example() {
        let mut r = vec![1.0; 10];
        r[9] = 10.0;
        let rep = detect(&r, 2.0, DetectionMode::Global).unwrap();
        // mean 19/10, population variance (9 * 0.81 + 65.61) / 10 = 7.29
        assert!((rep.mu_r - 1.9).abs() < 1e-12);
        assert!((rep.sigma_r - 2.7).abs() < 1e-12);
        assert!((rep.theta - 7.3).abs() < 1e-12);
        let flagged: Vec<usize> = (0..10).filter(|&i| rep.flags[i]).collect();
        assert_eq!(flagged, vec![9]);
        assert_eq!(rep.stats().theta, rep.mu_r + rep.alpha * rep.sigma_r);
    }

    #[test]
    fn rolling_warmup_is_unflagged() {
        let mut r = vec![0.1; 30];
        r[3] = 50.0;
        r[25] = 50.0;
        let rep = detect(&r, 2.0, DetectionMode::Rolling(10)).unwrap();
        assert!(!rep.flags[3]);
        assert!(rep.flags[25]);
        assert!(rep.thresholds.as_ref().unwrap()[8].is_none());
    }

    #[test]
    fn detect_errors() {
        assert!(detect(&[], 2.0, DetectionMode::Global).is_err());
        assert!(detect(&[1.0], 0.0, DetectionMode::Global).is_err());
        assert!(detect(&[1.0], 2.0, DetectionMode::Rolling(0)).is_err());
    }

    #[test]
    fn alpha_range_validation() {
        let mut cfg = AnomalyConfig::default();
        assert!(cfg.validate().unwrap().is_empty());
        cfg.alpha = 4.0;
        assert!(cfg.validate().is_err());
        cfg.allow_alpha_outside_range = true;
        assert_eq!(cfg.validate().unwrap().len(), 1);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_regularizer(&[0.0], &[0.0]).unwrap(), 0.0);
        assert!((kl_regularizer(&[1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        let want = 0.5 * (std::f64::consts::E - 2.0);
        assert!((kl_regularizer(&[0.0], &[1.0]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.35914).abs() < 1e-5);
        assert!(kl_regularizer(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn report_json_has_expected_keys() {
        let rep = detect(&[1.0, 2.0, 3.0], 2.0, DetectionMode::Global).unwrap();
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        for key in ["alpha", "mu_R", "sigma_R", "theta", "flags", "residuals"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
