//! Optimization of the joint objective: Adam with bias correction, cosine
//! learning-rate annealing, gradient clipping and early stopping on the
//! validation loss.
//!
//! Every window gets its own graph and its own random substream (keyed by
//! epoch and window index), and gradients are summed in window order, so a
//! run is a pure function of its seed.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelPlan, ParamStore};
use crate::numeric::{Graph, RngState};
use crate::risk::{joint_loss_graph, LossBreakdown, LossTerms};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Visit training windows in a fresh seeded order every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            batch_size: 32,
            seeds: vec![7, 11, 13, 17, 19],
            clip_norm: Some(5.0),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be a non-negative number, got {}", self.lr0));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam needs betas in [0, 1) and eps > 0".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * e / E))`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = epoch.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients are rejected before
/// anything is modified.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (e, g) in params.entries().iter().zip(grads) {
        if g.len() != e.data.len() {
            return Err(Error::shape(
                "adam_step",
                format!("`{}` has {} values, gradient {}", e.name, e.data.len(), g.len()),
            ));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                epoch: 0,
                reason: format!("gradient of `{}` is {bad}", e.name),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, e) in params.entries_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in e.data.iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Windows with their risk supervision targets.
#[derive(Debug, Clone, Copy)]
pub struct Labelled<'a> {
    pub windows: &'a WindowBatch,
    pub labels: &'a [f64],
}

impl<'a> Labelled<'a> {
    pub fn new(windows: &'a WindowBatch, labels: &'a [f64]) -> Result<Self> {
        if labels.len() != windows.len() {
            return Err(Error::shape(
                "labelled windows",
                format!("{} labels for {} windows", labels.len(), windows.len()),
            ));
        }
        Ok(Self { windows, labels })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Loss and (optionally) parameter gradients of one window.
pub fn window_loss(
    model: &ForecastModel,
    plan: &ModelPlan,
    data: Labelled<'_>,
    i: usize,
    training: bool,
    rng: &mut RngState,
    with_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Vec<f64>>>)> {
    let w = data.windows;
    let input = w.input(i);
    let mut g = Graph::new();
    let p = model.bind(&mut g, with_grads);
    let tr = model.trace(&mut g, &p, plan, input, &w.aux[i], training, rng)?;
    let close: Vec<f64> = input
        .chunks(model.config.feature_dim)
        .map(|r| r[crate::data::CLOSE])
        .collect();
    let loss = joint_loss_graph(
        &mut g,
        tr.forecast,
        w.target(i),
        tr.reconstruction,
        &close,
        tr.risk_score,
        data.labels[i],
        tr.mu,
        tr.logvar,
        &model.risk,
    )?;
    let breakdown = loss.breakdown(&g, &model.risk);
    if !with_grads {
        return Ok((breakdown, None));
    }
    g.backward(loss.total)?;
    let grads = p
        .vars()
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok((breakdown, Some(grads)))
}

/// Mean objective over every window, in inference mode.
pub fn evaluate_loss(model: &ForecastModel, plan: &ModelPlan, data: Labelled<'_>) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluate_loss"));
    }
    let mut rng = RngState::new(0);
    let mut sum = LossTerms::default();
    let mut total = 0.0;
    for i in 0..data.len() {
        let (b, _) = window_loss(model, plan, data, i, false, &mut rng, false)?;
        sum.add_assign(&b.weighted);
        total += b.total;
    }
    Ok(average(sum, total, data.len(), &model.risk))
}

fn average(weighted: LossTerms, total: f64, n: usize, cfg: &crate::risk::RiskConfig) -> LossBreakdown {
    let k = 1.0 / n as f64;
    let weighted = weighted.scaled(k);
    let unweight = |v: f64, w: f64| if w > 0.0 { v / w } else { f64::NAN };
    LossBreakdown {
        total: total * k,
        raw: LossTerms {
            forecast: weighted.forecast,
            recon: unweight(weighted.recon, cfg.lambda1),
            risk: unweight(weighted.risk, cfg.lambda2),
            kl: unweight(weighted.kl, cfg.beta),
        },
        weighted,
    }
}

/// Early-stopping bookkeeping. Training stops once the number of epochs
/// since the last improvement exceeds `patience`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped { epoch: usize },
    Diverged { epoch: usize, reason: String },
}

/// One row of the training log. `train_terms`/`val_terms` hold the weighted
/// contributions, which sum to the corresponding loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub train_terms: LossTerms,
    pub val_terms: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; 0 when none finished.
    pub best_epoch: usize,
    pub stop: StopReason,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map(|e| e.val_loss)
    }

    pub const CSV_HEADER: &'static str =
        "epoch,train_loss,val_loss,lr,forecast_term,recon_term,risk_term,kl_term,val_forecast_term,val_recon_term,val_risk_term,val_kl_term";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            let (t, v) = (&e.train_terms, &e.val_terms);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                e.val_loss,
                e.lr,
                t.forecast,
                t.recon,
                t.risk,
                t.kl,
                v.forecast,
                v.recon,
                v.risk,
                v.kl
            );
        }
        out
    }

    /// Train and validation loss against epoch, one polyline each.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const M: f64 = 56.0;
        let n = self.epochs.len();
        let values: Vec<f64> = self
            .epochs
            .iter()
            .flat_map(|e| [e.train_loss, e.val_loss])
            .filter(|v| v.is_finite())
            .collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let x = |epoch: usize| M + (W - 2.0 * M) * (epoch.saturating_sub(1)) as f64 / (n.max(2) - 1) as f64;
        let y = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);
        let line = |f: &dyn Fn(&EpochRecord) -> f64| -> String {
            self.epochs
                .iter()
                .filter(|e| f(e).is_finite())
                .map(|e| format!("{:.2},{:.2}", x(e.epoch), y(f(e))))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
            b = H - M,
            r = W - M
        );
        for tick in 0..=4 {
            let v = lo + (hi - lo) * tick as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{v:.4}</text>"#,
                M - 6.0,
                y(v) + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">Epoch</text>"#,
            W / 2.0,
            H - 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.1})">Loss</text>"#,
            H / 2.0,
            H / 2.0
        );
        let _ = writeln!(
            s,
            r##"<polyline id="train-loss" fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
            line(&|e| e.train_loss)
        );
        let _ = writeln!(
            s,
            r##"<polyline id="validation-loss" fill="none" stroke="#ff7f0e" stroke-width="2" points="{}"/>"##,
            line(&|e| e.val_loss)
        );
        let _ = writeln!(
            s,
            r##"<text x="{lx}" y="{ly}" font-size="12" fill="#1f77b4">Training loss</text><text x="{lx}" y="{ly2}" font-size="12" fill="#ff7f0e">Validation loss</text>"##,
            lx = W - M - 110.0,
            ly = M + 4.0,
            ly2 = M + 20.0
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, csv: &Path, svg: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::write(svg, self.to_svg()).map_err(|e| Error::io(svg, e))
    }
}

/// Trained model (best validation epoch) and its log.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: ForecastModel,
    pub log: TrainLog,
}

/// Minimizes the joint objective on `train`, early-stopping on `val`.
///
/// On a non-finite loss or gradient the run stops, the best parameters so far
/// (or the initial ones) are restored and the log records the divergence.
pub fn fit(
    mut model: ForecastModel,
    train: Labelled<'_>,
    val: Labelled<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData(
            "training needs non-empty train and validation windows".into(),
        ));
    }
    let plan = model.plan()?;
    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut log = TrainLog {
        seed,
        epochs: Vec::new(),
        best_epoch: 0,
        stop: StopReason::Completed,
    };

    'epochs: for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr0);
        let mut order: Vec<usize> = (0..train.len()).collect();
        if cfg.shuffle {
            RngState::derive(seed, epoch as u64).shuffle(&mut order);
        }
        let mut sum = LossTerms::default();
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = model.params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
            for &i in chunk {
                let stream = ((epoch as u64) << 32) | i as u64;
                let mut rng = RngState::derive(seed, stream);
                let (b, g) = window_loss(&model, &plan, train, i, true, &mut rng, true)?;
                if !b.total.is_finite() {
                    log.stop = StopReason::Diverged {
                        epoch,
                        reason: format!("training loss {} on window {i}", b.total),
                    };
                    break 'epochs;
                }
                sum.add_assign(&b.weighted);
                total += b.total;
                for (acc, g) in grads.iter_mut().zip(g.unwrap_or_default()) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            let k = 1.0 / chunk.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= k);
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            if let Err(e) = adam_step(&mut model.params, &grads, &mut adam, lr, cfg) {
                log.stop = StopReason::Diverged {
                    epoch,
                    reason: e.to_string(),
                };
                break 'epochs;
            }
        }
        let train_avg = average(sum, total, train.len(), &model.risk);
        let val_loss = evaluate_loss(&model, &plan, val);
        let val_loss = match val_loss {
            Ok(v) if v.total.is_finite() => v,
            Ok(v) => {
                log.stop = StopReason::Diverged {
                    epoch,
                    reason: format!("validation loss {}", v.total),
                };
                break;
            }
            Err(Error::NonFinite(what)) => {
                log.stop = StopReason::Diverged {
                    epoch,
                    reason: format!("non-finite {what}"),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: train_avg.total,
            val_loss: val_loss.total,
            lr,
            train_terms: train_avg.weighted,
            val_terms: val_loss.weighted,
        });
        match stopper.observe(epoch, val_loss.total) {
            StopDecision::Improved => best_params = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log.stop = StopReason::EarlyStopped { epoch };
                break;
            }
        }
    }
    log.best_epoch = stopper.best_epoch;
    model.params = best_params;
    Ok(FitOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamStore;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        s.push("w", vec![values.len()], values.to_vec());
        s
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 1e-4), 1e-4);
        assert!(cosine_lr(10, 10, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(5, 10, 1e-4) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // f(w) = w^2 at w = 1 has gradient 2
        let cfg = TrainConfig::default();
        let mut p = store(&[1.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[vec![2.0]], &mut st, 0.1, &cfg).unwrap();
        // m_hat = 2, v_hat = 4: step = 0.1 * 2 / (2 + 1e-8)
        let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert_eq!(p.entries()[0].data[0], want);
        assert!((want - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = TrainConfig::default();
        let mut p = store(&[0.5, -2.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[vec![1.0, 1.0]], &mut st, 0.0, &cfg).unwrap();
        assert_eq!(p.entries()[0].data, vec![0.5, -2.0]);
        let mut p = store(&[0.5, -2.0]);
        let mut st = AdamState::new(&p);
        st.m[0] = vec![0.0, 0.0];
        adam_step(&mut p, &[vec![0.0, 0.0]], &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p.entries()[0].data, vec![0.5, -2.0]);
    }

    #[test]
    fn nan_gradient_is_rejected_untouched() {
        let cfg = TrainConfig::default();
        let mut p = store(&[1.0]);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[vec![f64::NAN]], &mut st, 0.1, &cfg).is_err());
        assert_eq!(p.entries()[0].data, vec![1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn early_stopping_contract() {
        // patience 1, validation loss rising after epoch 1
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(s.observe(2, 1.1), StopDecision::Continue);
        assert_eq!(s.observe(3, 1.2), StopDecision::Stop);
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn svg_has_both_curves() {
        let rec = |epoch, t, v| EpochRecord {
            epoch,
            train_loss: t,
            val_loss: v,
            lr: 1e-4,
            train_terms: LossTerms::default(),
            val_terms: LossTerms::default(),
        };
        let log = TrainLog {
            seed: 1,
            epochs: vec![rec(1, 1.0, 1.2), rec(2, 0.5, 0.7)],
            best_epoch: 2,
            stop: StopReason::Completed,
        };
        let svg = log.to_svg();
        assert!(svg.contains("train-loss") && svg.contains("validation-loss"));
        assert_eq!(log.to_csv().lines().count(), 3);
        assert_eq!(log.best_val_loss(), Some(0.7));
    }
}
