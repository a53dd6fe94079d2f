//! Risk-score head and the joint training objective.
//!
//! The head maps `[mean_t z_t || v]` (time-pooled latent plus auxiliary
//! market indicators) through a small GELU MLP to a score. The objective is
//!
//! `L = MSE(forecast) + lambda1 * L1(recon) + lambda2 * L_risk + beta * KL`.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::anomaly::{kl_regularizer, kl_term};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMode {
    /// Sigmoid score trained with binary cross-entropy.
    #[default]
    Classification,
    /// Linear score trained with squared error.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskConfig {
    pub hidden: Vec<usize>,
    pub aux_dim: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight of the latent KL term.
    pub beta: f64,
    pub risk_mode: RiskMode,
    /// Training-split percentile of horizon volatility above which a window
    /// is labelled high-risk.
    pub label_percentile: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            aux_dim: crate::data::AUX_DIM,
            lambda1: 0.5,
            lambda2: 0.5,
            beta: 0.01,
            risk_mode: RiskMode::Classification,
            label_percentile: 0.9,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("risk hidden sizes must be positive".into()));
        }
        if !(self.label_percentile > 0.0 && self.label_percentile < 1.0) {
            return Err(Error::Config(format!(
                "label_percentile must lie in (0, 1), got {}",
                self.label_percentile
            )));
        }
        Ok(())
    }

    /// `(inputs, outputs)` of each MLP layer for a given latent width.
    pub fn layer_shapes(&self, latent_dim: usize) -> Vec<(usize, usize)> {
        let mut sizes = vec![latent_dim + self.aux_dim];
        sizes.extend(&self.hidden);
        sizes.push(1);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Records the risk MLP on `g`. `pooled` is `1 x latent_dim`, `aux` is
/// `1 x aux_dim`, and `layers` holds `(weight, bias)` per layer.
pub fn risk_head(g: &mut Graph, pooled: Var, aux: Var, layers: &[(Var, Var)], mode: RiskMode) -> Result<Var> {
    let mut x = g.concat_cols(&[pooled, aux])?;
    for (i, &(w, b)) in layers.iter().enumerate() {
        x = g.matmul(x, w)?;
        x = g.add_row(x, b)?;
        if i + 1 < layers.len() {
            x = g.gelu(x);
        }
    }
    Ok(match mode {
        RiskMode::Classification => g.sigmoid(x),
        RiskMode::Regression => x,
    })
}

/// Evaluates [`risk_head`] on plain values.
pub fn risk_forward(pooled: &[f64], aux: &[f64], layers: &[(Tensor, Tensor)], mode: RiskMode) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(Tensor::row(pooled.to_vec()));
    let a = g.constant(Tensor::row(aux.to_vec()));
    let vars: Vec<(Var, Var)> = layers
        .iter()
        .map(|(w, b)| (g.constant(w.clone()), g.constant(b.clone())))
        .collect();
    let out = risk_head(&mut g, p, a, &vars, mode)?;
    Ok(g.scalar(out))
}

/// The four loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub forecast: f64,
    pub recon: f64,
    pub risk: f64,
    pub kl: f64,
}

impl LossTerms {
    /// Sum in the fixed order used for the total.
    pub fn sum(&self) -> f64 {
        ((self.forecast + self.recon) + self.risk) + self.kl
    }

    pub fn add_assign(&mut self, other: &LossTerms) {
        self.forecast += other.forecast;
        self.recon += other.recon;
        self.risk += other.risk;
        self.kl += other.kl;
    }

    pub fn scaled(&self, k: f64) -> LossTerms {
        LossTerms {
            forecast: self.forecast * k,
            recon: self.recon * k,
            risk: self.risk * k,
            kl: self.kl * k,
        }
    }
}

/// Objective value with its unweighted components and weighted contributions.
/// `total == weighted.sum()` by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub raw: LossTerms,
    pub weighted: LossTerms,
}

impl LossBreakdown {
    pub fn from_raw(raw: LossTerms, cfg: &RiskConfig) -> Self {
        let weighted = LossTerms {
            forecast: raw.forecast,
            recon: cfg.lambda1 * raw.recon,
            risk: cfg.lambda2 * raw.risk,
            kl: cfg.beta * raw.kl,
        };
        Self {
            total: weighted.sum(),
            raw,
            weighted,
        }
    }
}

/// Risk term for one score/label pair.
fn risk_loss_value(score: f64, label: f64, mode: RiskMode) -> f64 {
    match mode {
        RiskMode::Classification => {
            let p = score.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
        }
        RiskMode::Regression => (score - label) * (score - label),
    }
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// Joint objective on plain values.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    forecast: &[f64],
    forecast_target: &[f64],
    recon: &[f64],
    recon_target: &[f64],
    risk_score: f64,
    risk_label: f64,
    mu: &[f64],
    logvar: &[f64],
    cfg: &RiskConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    check_len("joint_loss forecast", forecast, forecast_target)?;
    check_len("joint_loss reconstruction", recon, recon_target)?;
    let mse = forecast
        .iter()
        .zip(forecast_target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / forecast.len() as f64;
    let l1 = recon.iter().zip(recon_target).map(|(a, b)| (a - b).abs()).sum::<f64>() / recon.len() as f64;
    let raw = LossTerms {
        forecast: mse,
        recon: l1,
        risk: risk_loss_value(risk_score, risk_label, cfg.risk_mode),
        kl: kl_regularizer(mu, logvar)?,
    };
    Ok(LossBreakdown::from_raw(raw, cfg))
}

/// Graph nodes of the joint objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub forecast: Var,
    pub recon: Var,
    pub risk: Var,
    pub kl: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, cfg: &RiskConfig) -> LossBreakdown {
        let raw = LossTerms {
            forecast: g.scalar(self.forecast),
            recon: g.scalar(self.recon),
            risk: g.scalar(self.risk),
            kl: g.scalar(self.kl),
        };
        let b = LossBreakdown::from_raw(raw, cfg);
        debug_assert_eq!(b.total.to_bits(), g.scalar(self.total).to_bits());
        b
    }
}

/// Records the joint objective. Every term is always recorded, so a zero
/// weight yields exactly zero gradient along its path.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_graph(
    g: &mut Graph,
    forecast: Var,
    forecast_target: &[f64],
    recon: Var,
    recon_target: &[f64],
    risk_score: Var,
    risk_label: f64,
    mu: Var,
    logvar: Var,
    cfg: &RiskConfig,
) -> Result<LossVars> {
    let (fr, fc) = g.value(forecast).dims();
    let ft = g.constant(Tensor::matrix(fr, fc, forecast_target.to_vec()));
    let diff = g.sub(forecast, ft)?;
    let sq = g.square(diff);
    let f = g.mean(sq);

    let (rr, rc) = g.value(recon).dims();
    let rt = g.constant(Tensor::matrix(rr, rc, recon_target.to_vec()));
    let diff = g.sub(recon, rt)?;
    let ab = g.abs(diff);
    let r = g.mean(ab);

    let k = match cfg.risk_mode {
        RiskMode::Classification => g.bce(risk_score, vec![risk_label])?,
        RiskMode::Regression => {
            let lbl = g.constant(Tensor::matrix(1, 1, vec![risk_label]));
            let d = g.sub(risk_score, lbl)?;
            g.square(d)
        }
    };
    let kl = kl_term(g, mu, logvar)?;

    let wr = g.scale(r, cfg.lambda1);
    let wk = g.scale(k, cfg.lambda2);
    let wkl = g.scale(kl, cfg.beta);
    let t = g.add(f, wr)?;
    let t = g.add(t, wk)?;
    let total = g.add(t, wkl)?;
    Ok(LossVars {
        total,
        forecast: f,
        recon: r,
        risk: k,
        kl,
    })
}

/// Root-mean-square of `vol[origin..origin + horizon]`, or `None` past the end.
pub fn horizon_volatility(vol: &[f64], origin: usize, horizon: usize) -> Option<f64> {
    let w = vol.get(origin..origin + horizon)?;
    if w.is_empty() {
        return None;
    }
    Some((w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt())
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("percentile"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Ground-truth rule for the risk head: a window is high-risk when the
/// realized volatility over its forecast horizon exceeds a percentile of the
/// same quantity on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskLabeler {
    pub horizon: usize,
    pub percentile: f64,
    pub threshold: f64,
    pub mode: RiskMode,
}

impl RiskLabeler {
    /// Fits the threshold on the windows starting at `origins`.
    pub fn fit(vol: &[f64], origins: &[usize], horizon: usize, cfg: &RiskConfig) -> Result<Self> {
        let hv: Vec<f64> = origins
            .iter()
            .filter_map(|&o| horizon_volatility(vol, o, horizon))
            .collect();
        Ok(Self {
            horizon,
            percentile: cfg.label_percentile,
            threshold: percentile(&hv, cfg.label_percentile)?,
            mode: cfg.risk_mode,
        })
    }

    /// Supervision target of the window starting at `origin`: a 0/1 label in
    /// classification mode, horizon volatility relative to the threshold in
    /// regression mode. `None` when the horizon runs past the data.
    pub fn label(&self, vol: &[f64], origin: usize) -> Option<f64> {
        let hv = horizon_volatility(vol, origin, self.horizon)?;
        Some(match self.mode {
            RiskMode::Classification => f64::from(u8::from(hv > self.threshold)),
            RiskMode::Regression => {
                if self.threshold > 0.0 {
                    hv / self.threshold
                } else {
                    hv
                }
            }
        })
    }

    pub fn describe(&self) -> String {
        format!(
            "horizon-{} RMS Parkinson volatility above the training p{} ({:.6})",
            self.horizon,
            self.percentile * 100.0,
            self.threshold
        )
    }
}

/// Per-window risk scores with their labels, keyed by the last input date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSeries {
    pub definition: String,
    pub mode: RiskMode,
    pub dates: Vec<NaiveDate>,
    pub scores: Vec<f64>,
    /// `None` where the horizon extends past the data.
    pub labels: Vec<Option<f64>>,
}

impl RiskSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("window_end_date,score,label\n");
        for ((d, s), l) in self.dates.iter().zip(&self.scores).zip(&self.labels) {
            let label = l.map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!("{},{s},{label}\n", d.format("%Y-%m-%d")));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads the CSV written by [`RiskSeries::write_csv`].
    pub fn read_csv(path: &Path, mode: RiskMode) -> Result<Self> {
        let wrap = |message: String| Error::Data {
            path: path.to_path_buf(),
            message,
        };
        let mut rd = csv::Reader::from_path(path).map_err(|e| wrap(e.to_string()))?;
        let mut s = Self {
            definition: String::new(),
            mode,
            dates: Vec::new(),
            scores: Vec::new(),
            labels: Vec::new(),
        };
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| wrap(e.to_string()))?;
            let bad = || wrap(format!("row {}: expected window_end_date,score,label", i + 2));
            if rec.len() != 3 {
                return Err(bad());
            }
            s.dates
                .push(NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d").map_err(|_| bad())?);
            s.scores.push(rec[1].trim().parse().map_err(|_| bad())?);
            let label = rec[2].trim();
            s.labels.push(if label.is_empty() {
                None
            } else {
                Some(label.parse().map_err(|_| bad())?)
            });
        }
        Ok(s)
    }

    /// Labelled `(positive, score)` pairs, for AUC. Regression targets are
    /// volatility relative to the labeler threshold, so positive means above 1.
    pub fn labelled(&self) -> (Vec<bool>, Vec<f64>) {
        let cut = match self.mode {
            RiskMode::Classification => 0.5,
            RiskMode::Regression => 1.0,
        };
        self.labels
            .iter()
            .zip(&self.scores)
            .filter_map(|(l, &s)| l.map(|l| (l > cut, s)))
            .unzip()
    }
}
