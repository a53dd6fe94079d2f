//! End-to-end runs: data preparation, training, scanning a segment for
//! anomalies and risk, scoring against ground truth, and seed aggregation.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::anomaly::{detect, residuals, AnomalyConfig, AnomalyReport, ResidualSource};
use crate::config::RunConfig;
use crate::data::{
    aux_indicators, compute_features, input_window, make_windows, synth_generate, FeatureMatrix, Split,
    TimeSeriesFrame, WindowSet, WindowSpec, CLOSE, VOLATILITY,
};
use crate::error::{Error, Result};
use crate::metrics::{auc, classification_metrics, regression_metrics, EvalReport};
use crate::model::{Checkpoint, ForecastModel};
use crate::numeric::RngState;
use crate::risk::{RiskLabeler, RiskSeries};
use crate::training::{fit, Labelled, TrainLog};

/// Features, windows and risk supervision for one series.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: FeatureMatrix,
    pub windows: WindowSet,
    pub labeler: RiskLabeler,
    pub train_labels: Vec<f64>,
    pub val_labels: Vec<f64>,
}

pub fn prepare(frame: &TimeSeriesFrame, cfg: &RunConfig) -> Result<Prepared> {
    let features = compute_features(frame, cfg.features)?;
    let spec = WindowSpec {
        seq_len: cfg.model.seq_len,
        horizon: cfg.model.horizon,
        stride: cfg.data.train_stride,
    };
    let windows = make_windows(&features, spec, cfg.data.split)?;
    let vol = features.column(VOLATILITY);
    let train = windows.get(Split::Train).ok_or(Error::EmptyInput("training windows"))?;
    let labeler = RiskLabeler::fit(&vol, &train.origins, cfg.model.horizon, &cfg.risk)?;
    let labels = |split: Split| -> Result<Vec<f64>> {
        windows
            .get(split)
            .map(|b| {
                b.origins
                    .iter()
                    .map(|&o| labeler.label(&vol, o).ok_or(Error::EmptyInput("risk label")))
                    .collect()
            })
            .unwrap_or(Ok(Vec::new()))
    };
    let train_labels = labels(Split::Train)?;
    let val_labels = labels(Split::Val)?;
    Ok(Prepared {
        features,
        windows,
        labeler,
        train_labels,
        val_labels,
    })
}

/// Trains one seed. Validation falls back to the training windows when the
/// split has no validation part.
pub fn train(prepared: &Prepared, cfg: &RunConfig, seed: u64) -> Result<(Checkpoint, TrainLog)> {
    let tr = prepared
        .windows
        .get(Split::Train)
        .ok_or(Error::EmptyInput("training windows"))?;
    let train = Labelled::new(tr, &prepared.train_labels)?;
    let val = match prepared.windows.get(Split::Val) {
        Some(v) if !v.is_empty() => Labelled::new(v, &prepared.val_labels)?,
        _ => train,
    };
    let model = ForecastModel::new(cfg.model.clone(), cfg.risk.clone(), seed)?;
    let out = fit(model, train, val, &cfg.train, seed)?;
    let ck = Checkpoint::new(
        out.model,
        cfg.features,
        prepared.windows.scaler.clone(),
        Some(prepared.labeler),
    );
    Ok((ck, out.log))
}

/// Multi-step forecast issued after the close of `origin_date`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub origin_date: NaiveDate,
    pub last_close: f64,
    pub predicted: Vec<f64>,
    /// Observed closes, when the whole horizon lies inside the data.
    pub actual: Option<Vec<f64>>,
}

/// Model outputs over a segment, in price units.
///
/// Entry `j` concerns feature row `start + j`: `predicted_close[j]` is the
/// first forecast step of the window ending the day before, `residuals[j]`
/// its absolute error, and `forecasts[j]`, `reconstructed_last[j]` (fit of
/// that window's last day) and `risk` entries belong to that same window.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub start: usize,
    pub dates: Vec<NaiveDate>,
    pub actual_close: Vec<f64>,
    pub predicted_close: Vec<f64>,
    pub residuals: Vec<f64>,
    pub forecasts: Vec<ForecastRow>,
    pub reconstructed_last: Vec<f64>,
    pub risk: RiskSeries,
}

/// Runs the model on every window whose first forecast day lies in `rows`.
/// Days without a full input window of history are skipped.
pub fn scan(ck: &Checkpoint, features: &FeatureMatrix, rows: Range<usize>) -> Result<Scan> {
    let cfg = &ck.model.config;
    let (t_len, k) = (cfg.seq_len, cfg.horizon);
    let n = features.len();
    let start = rows.start.max(t_len);
    let end = rows.end.min(n);
    if start >= end {
        return Err(Error::InsufficientData(format!(
            "no day in rows {rows:?} has {t_len} days of history (series has {n} rows)"
        )));
    }
    let scaled = ck.scaler.scale_rows(&features.rows);
    let vol = features.column(VOLATILITY);
    let plan = ck.model.plan()?;
    let mut rng = RngState::new(0);
    let unscale = |x: f64| ck.scaler.unscale_value(CLOSE, x);

    let mut out = Scan {
        start,
        dates: Vec::new(),
        actual_close: Vec::new(),
        predicted_close: Vec::new(),
        residuals: Vec::new(),
        forecasts: Vec::new(),
        reconstructed_last: Vec::new(),
        risk: RiskSeries {
            definition: ck.labeler.map(|l| l.describe()).unwrap_or_default(),
            mode: ck.model.risk.risk_mode,
            dates: Vec::new(),
            scores: Vec::new(),
            labels: Vec::new(),
        },
    };
    for t in start..end {
        let input = input_window(&scaled, t, t_len)?;
        let aux = aux_indicators(&scaled, t, k);
        let f = ck.model.forward_with(&plan, &input, &aux, false, &mut rng)?;
        let predicted: Vec<f64> = f.forecast.data().iter().map(|&x| unscale(x)).collect();
        let actual = features.rows[t][CLOSE];
        out.reconstructed_last.push(unscale(f.reconstruction.data()[t_len - 1]));
        out.dates.push(features.dates[t]);
        out.actual_close.push(actual);
        out.predicted_close.push(predicted[0]);
        out.forecasts.push(ForecastRow {
            origin_date: features.dates[t - 1],
            last_close: features.rows[t - 1][CLOSE],
            actual: (t + k <= n).then(|| features.rows[t..t + k].iter().map(|r| r[CLOSE]).collect()),
            predicted,
        });
        out.risk.dates.push(features.dates[t - 1]);
        out.risk.scores.push(f.risk_score);
        out.risk.labels.push(ck.labeler.and_then(|l| l.label(&vol, t)));
    }
    out.residuals = residuals(&out.actual_close, &out.predicted_close)?;
    Ok(out)
}

/// Forecast from the last `seq_len` rows of the series.
pub fn forecast_next(ck: &Checkpoint, features: &FeatureMatrix) -> Result<ForecastRow> {
    let cfg = &ck.model.config;
    let n = features.len();
    let scaled = ck.scaler.scale_rows(&features.rows);
    let input = input_window(&scaled, n, cfg.seq_len)?;
    let aux = aux_indicators(&scaled, n, cfg.horizon);
    let f = ck.model.forward(&input, &aux, false, &mut RngState::new(0))?;
    Ok(ForecastRow {
        origin_date: features.dates[n - 1],
        last_close: features.rows[n - 1][CLOSE],
        predicted: f
            .forecast
            .data()
            .iter()
            .map(|&x| ck.scaler.unscale_value(CLOSE, x))
            .collect(),
        actual: None,
    })
}

pub fn forecasts_csv(rows: &[ForecastRow]) -> String {
    let mut out = String::from("origin_date,step,forecast,actual,persistence\n");
    for r in rows {
        for (i, p) in r.predicted.iter().enumerate() {
            let actual = r.actual.as_ref().map(|a| format!("{}", a[i])).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{p},{actual},{}\n",
                r.origin_date.format("%Y-%m-%d"),
                i + 1,
                r.last_close
            ));
        }
    }
    out
}

/// Parses the output of [`forecasts_csv`] back into rows.
pub fn load_forecasts(path: &Path) -> Result<Vec<ForecastRow>> {
    let wrap = |message: String| Error::Data {
        path: path.to_path_buf(),
        message,
    };
    let mut rd = csv::Reader::from_path(path).map_err(|e| wrap(e.to_string()))?;
    let mut rows: Vec<ForecastRow> = Vec::new();
    let num = |s: &str, line: usize| -> Result<f64> {
        s.trim()
            .parse()
            .map_err(|_| wrap(format!("row {line}: bad number {s:?}")))
    };
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| wrap(e.to_string()))?;
        if rec.len() != 5 {
            return Err(wrap(format!(
                "row {line}: expected origin_date,step,forecast,actual,persistence"
            )));
        }
        let date = NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d")
            .map_err(|e| wrap(format!("row {line}: bad date {:?}: {e}", &rec[0])))?;
        let step: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| wrap(format!("row {line}: bad step")))?;
        let forecast = num(&rec[2], line)?;
        let actual = if rec[3].trim().is_empty() {
            None
        } else {
            Some(num(&rec[3], line)?)
        };
        let last = num(&rec[4], line)?;
        if step == 1 {
            rows.push(ForecastRow {
                origin_date: date,
                last_close: last,
                predicted: Vec::new(),
                actual: actual.map(|_| Vec::new()),
            });
        }
        let row = match rows.last_mut() {
            Some(r) if r.origin_date == date && r.predicted.len() + 1 == step => r,
            _ => return Err(wrap(format!("row {line}: steps must run 1, 2, ... per origin"))),
        };
        row.predicted.push(forecast);
        match (&mut row.actual, actual) {
            (Some(a), Some(v)) => a.push(v),
            (None, None) => {}
            _ => row.actual = None,
        }
    }
    for r in &mut rows {
        if r.actual.as_ref().is_some_and(|a| a.len() != r.predicted.len()) {
            r.actual = None;
        }
    }
    Ok(rows)
}

/// Applies the residual detector to a scan and attaches dates.
pub fn detect_scan(s: &Scan, cfg: &AnomalyConfig) -> Result<AnomalyReport> {
    let warnings = cfg.validate()?;
    let (res, dates) = match cfg.residual_source {
        ResidualSource::OneStep => (s.residuals.clone(), s.dates.clone()),
        ResidualSource::Reconstruction => {
            let observed: Vec<f64> = s.forecasts.iter().map(|f| f.last_close).collect();
            let dates = s.forecasts.iter().map(|f| f.origin_date).collect();
            (residuals(&observed, &s.reconstructed_last)?, dates)
        }
    };
    let mut report = detect(&res, cfg.alpha, cfg.detection_mode())?;
    report.dates = Some(dates.iter().map(|d| d.format("%Y-%m-%d").to_string()).collect());
    report.warnings = warnings;
    Ok(report)
}

/// `(date, is_anomaly)` pairs in file order.
pub type Truth = Vec<(NaiveDate, bool)>;

pub fn load_truth(path: &Path) -> Result<Truth> {
    let wrap = |message: String| Error::Data {
        path: path.to_path_buf(),
        message,
    };
    let mut rd = csv::Reader::from_path(path).map_err(|e| wrap(e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| wrap(e.to_string()))?;
        let (Some(d), Some(a)) = (rec.get(0), rec.get(1)) else {
            return Err(wrap(format!("row {}: expected date,is_anomaly", i + 2)));
        };
        let date = NaiveDate::parse_from_str(d.trim(), "%Y-%m-%d")
            .map_err(|e| wrap(format!("row {}: bad date {d:?}: {e}", i + 2)))?;
        let flag = match a.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(wrap(format!("row {}: bad label {other:?}", i + 2))),
        };
        out.push((date, flag));
    }
    Ok(out)
}

/// `(labels, flags)` on the dates present in both the report and the truth.
pub fn align_truth(report: &AnomalyReport, truth: &[(NaiveDate, bool)]) -> Result<(Vec<bool>, Vec<bool>)> {
    let dates = report
        .dates
        .as_ref()
        .ok_or_else(|| Error::Config("anomaly report carries no dates to align with the truth".into()))?;
    let lookup: HashMap<String, bool> = truth
        .iter()
        .map(|(d, a)| (d.format("%Y-%m-%d").to_string(), *a))
        .collect();
    let (labels, flags): (Vec<bool>, Vec<bool>) = dates
        .iter()
        .zip(&report.flags)
        .filter_map(|(d, &f)| lookup.get(d).map(|&a| (a, f)))
        .unzip();
    if labels.is_empty() {
        let span = |v: &[String]| match (v.first(), v.last()) {
            (Some(a), Some(b)) => format!("{a}..{b}"),
            _ => "empty".into(),
        };
        let tdates: Vec<String> = truth.iter().map(|(d, _)| d.format("%Y-%m-%d").to_string()).collect();
        return Err(Error::InsufficientData(format!(
            "truth dates ({}) and report dates ({}) must overlap",
            span(&tdates),
            span(dates)
        )));
    }
    Ok((labels, flags))
}

/// Forecast accuracy over complete-horizon rows plus the persistence RMSE.
pub fn forecast_accuracy(rows: &[ForecastRow]) -> Result<Option<(crate::metrics::RegressionMetrics, f64)>> {
    let (mut y, mut y_hat, mut base) = (Vec::new(), Vec::new(), Vec::new());
    for r in rows {
        if let Some(a) = &r.actual {
            y.extend_from_slice(a);
            y_hat.extend_from_slice(&r.predicted);
            base.extend(std::iter::repeat_n(r.last_close, a.len()));
        }
    }
    if y.is_empty() {
        return Ok(None);
    }
    let model = regression_metrics(&y, &y_hat)?;
    let persistence = regression_metrics(&y, &base)?;
    Ok(Some((model, persistence.rmse)))
}

/// Scores a scan: forecasts in price units, detection flags against the
/// truth (when given), and risk AUC over labelled windows.
pub fn evaluate(s: &Scan, report: &AnomalyReport, truth: Option<&[(NaiveDate, bool)]>) -> Result<EvalReport> {
    let accuracy = forecast_accuracy(&s.forecasts)?;
    let detection = match truth {
        Some(t) => {
            let (labels, flags) = align_truth(report, t)?;
            Some(classification_metrics(&labels, &flags)?)
        }
        None => None,
    };
    let (risk_labels, risk_scores) = s.risk.labelled();
    let risk_auc = if risk_labels.is_empty() {
        None
    } else {
        auc(&risk_labels, &risk_scores)?
    };
    let mut ev = EvalReport::from_parts(accuracy.as_ref().map(|a| &a.0), detection.as_ref(), risk_auc);
    ev.persistence_rmse = accuracy.map(|a| a.1);
    if risk_auc.is_none() {
        ev.notes.push("AUC undefined: risk labels have a single class".into());
    }
    Ok(ev)
}

/// One trained seed and everything derived from it.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub scan: Scan,
    pub anomalies: AnomalyReport,
    pub report: EvalReport,
    pub train_seconds: f64,
}

/// Loads the configured CSV, or generates the synthetic series together
/// with its anomaly truth.
pub fn load_series(cfg: &RunConfig) -> Result<(TimeSeriesFrame, Option<Truth>)> {
    match &cfg.data.csv {
        Some(path) => {
            let (frame, _) = crate::data::load_ohlcv(path)?;
            let truth = cfg.data.truth.as_deref().map(load_truth).transpose()?;
            Ok((frame, truth))
        }
        None => {
            let s = synth_generate(&cfg.synth)?;
            let truth = s
                .frame
                .dates
                .iter()
                .copied()
                .zip(s.anomaly_mask.iter().copied())
                .collect();
            Ok((s.frame, Some(truth)))
        }
    }
}

/// Train, scan the evaluation split, detect and score.
pub fn run_experiment(
    prepared: &Prepared,
    cfg: &RunConfig,
    truth: Option<&[(NaiveDate, bool)]>,
    seed: u64,
) -> Result<Experiment> {
    let t0 = std::time::Instant::now();
    let (checkpoint, log) = train(prepared, cfg, seed)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let rows = prepared.windows.bounds.range(cfg.data.eval_split);
    let scan = scan(&checkpoint, &prepared.features, rows)?;
    let anomalies = detect_scan(&scan, &cfg.anomaly)?;
    let report = evaluate(&scan, &anomalies, truth)?;
    Ok(Experiment {
        seed,
        checkpoint,
        log,
        scan,
        anomalies,
        report,
        train_seconds,
    })
}

/// File names of the artifacts written by [`write_experiment`].
pub mod artifacts {
    pub const CHECKPOINT: &str = "checkpoint.json";
    pub const TRAIN_LOG: &str = "train_log.csv";
    pub const LOSS_SVG: &str = "loss_curve.svg";
    pub const ANOMALIES: &str = "anomaly_report.json";
    pub const RISK: &str = "risk_series.csv";
    pub const FORECASTS: &str = "forecasts.csv";
    pub const EVAL_JSON: &str = "eval_report.json";
    pub const EVAL_CSV: &str = "eval_report.csv";
    pub const RESOLVED_CONFIG: &str = "resolved_config.json";
    pub const AGGREGATE: &str = "aggregate.json";
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_experiment(dir: &Path, e: &Experiment) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    e.checkpoint.save(&dir.join(artifacts::CHECKPOINT))?;
    e.log
        .write(&dir.join(artifacts::TRAIN_LOG), &dir.join(artifacts::LOSS_SVG))?;
    write_json(&dir.join(artifacts::ANOMALIES), &e.anomalies)?;
    e.scan.risk.write_csv(&dir.join(artifacts::RISK))?;
    write_text(&dir.join(artifacts::FORECASTS), &forecasts_csv(&e.scan.forecasts))?;
    write_json(&dir.join(artifacts::EVAL_JSON), &e.report)?;
    write_text(&dir.join(artifacts::EVAL_CSV), &e.report.to_csv())
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: Option<f64>,
    /// Zero for a single seed.
    pub std: Option<f64>,
    /// Seeds on which the metric was defined.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricSummary>,
}

impl Aggregate {
    /// `metric,mean,std,n` rows in table order.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_else(|| "NaN".into());
        let mut out = String::from("metric,mean,std,n\n");
        for m in &self.metrics {
            out.push_str(&format!("{},{},{},{}\n", m.metric, fmt(m.mean), fmt(m.std), m.n));
        }
        out
    }
}

pub fn aggregate(runs: &[(u64, EvalReport)]) -> Aggregate {
    let metrics = EvalReport::CSV_HEADER
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let v: Vec<f64> = runs.iter().filter_map(|(_, r)| r.values()[j]).collect();
            let n = v.len();
            let mean = (n > 0).then(|| v.iter().sum::<f64>() / n as f64);
            let std = mean.map(|m| {
                if n < 2 {
                    0.0
                } else {
                    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                }
            });
            MetricSummary {
                metric: (*name).to_string(),
                mean,
                std,
                n,
            }
        })
        .collect();
    Aggregate {
        seeds: runs.iter().map(|(s, _)| *s).collect(),
        metrics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitRatios, SynthConfig};
    use crate::model::ModelConfig;

    fn toy() -> RunConfig {
        let mut cfg = RunConfig {
            synth: SynthConfig {
                n: 200,
                ..SynthConfig::default()
            },
            ..RunConfig::default()
        };
        cfg.model = ModelConfig {
            seq_len: 32,
            horizon: 8,
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            modes: 4,
            trend_window: 5,
            latent_dim: 4,
            ff_dim: 8,
            ..ModelConfig::default()
        };
        cfg.data.split = SplitRatios {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        };
        cfg.data.train_stride = 4;
        cfg.train.epochs = 2;
        cfg
    }

    #[test]
    fn toy_experiment_end_to_end() {
        let cfg = toy();
        cfg.validate().unwrap();
        let (frame, truth) = load_series(&cfg).unwrap();
        let prepared = prepare(&frame, &cfg).unwrap();
        assert_eq!(
            prepared.train_labels.len(),
            prepared.windows.get(Split::Train).unwrap().len()
        );
        let e = run_experiment(&prepared, &cfg, truth.as_deref(), 7).unwrap();
        let test = prepared.windows.bounds.test.clone();
        assert_eq!(e.scan.start, test.start);
        assert_eq!(e.scan.dates.len(), test.len());
        assert_eq!(e.anomalies.flags.len(), test.len());
        assert_eq!(e.report.n, test.len());
        assert!(e.report.rmse.is_some() && e.report.persistence_rmse.is_some());
        // residuals are |actual - first forecast step|
        for j in 0..e.scan.dates.len() {
            let r = (e.scan.actual_close[j] - e.scan.forecasts[j].predicted[0]).abs();
            assert_eq!(e.scan.residuals[j], r);
        }
        let dir = tempfile::tempdir().unwrap();
        write_experiment(dir.path(), &e).unwrap();
        for f in [
            artifacts::CHECKPOINT,
            artifacts::TRAIN_LOG,
            artifacts::LOSS_SVG,
            artifacts::EVAL_CSV,
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let ck = Checkpoint::load(&dir.path().join(artifacts::CHECKPOINT)).unwrap();
        let again = scan(&ck, &prepared.features, test.clone()).unwrap();
        assert_eq!(again, e.scan);

        let recon = AnomalyConfig {
            residual_source: ResidualSource::Reconstruction,
            ..cfg.anomaly.clone()
        };
        let r = detect_scan(&e.scan, &recon).unwrap();
        let first = e.scan.forecasts[0].origin_date.format("%Y-%m-%d").to_string();
        assert_eq!(r.dates.as_ref().unwrap()[0], first);
        assert_eq!(
            r.residuals[0],
            (e.scan.forecasts[0].last_close - e.scan.reconstructed_last[0]).abs()
        );
    }

    #[test]
    fn forecasts_csv_round_trip() {
        let d = |day| NaiveDate::from_ymd_opt(2020, 1, day).unwrap();
        let rows = vec![
            ForecastRow {
                origin_date: d(2),
                last_close: 10.5,
                predicted: vec![1.0, 2.25],
                actual: Some(vec![0.5, 2.0]),
            },
            ForecastRow {
                origin_date: d(3),
                last_close: 11.0,
                predicted: vec![3.0, 4.0],
                actual: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_text(&path, &forecasts_csv(&rows)).unwrap();
        assert_eq!(load_forecasts(&path).unwrap(), rows);
        let (m, base) = forecast_accuracy(&rows).unwrap().unwrap();
        assert!((m.mae - 0.375).abs() < 1e-15);
        assert!((base - ((10.0f64.powi(2) + 8.5f64.powi(2)) / 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn scan_rejects_segment_without_history() {
        let cfg = toy();
        let (frame, _) = load_series(&cfg).unwrap();
        let prepared = prepare(&frame, &cfg).unwrap();
        let ck = Checkpoint::new(
            ForecastModel::new(cfg.model.clone(), cfg.risk.clone(), 1).unwrap(),
            cfg.features,
            prepared.windows.scaler.clone(),
            None,
        );
        assert!(scan(&ck, &prepared.features, 0..10).is_err());
        let s = scan(&ck, &prepared.features, 0..40).unwrap();
        assert_eq!(s.start, 32);
        assert!(s.risk.labels.iter().all(Option::is_none));
    }

    #[test]
    fn disjoint_truth_is_an_error() {
        let report = AnomalyReport {
            dates: Some(vec!["2020-01-02".into()]),
            ..detect(&[1.0], 2.5, crate::anomaly::DetectionMode::Global).unwrap()
        };
        let truth = [(NaiveDate::from_ymd_opt(2021, 1, 4).unwrap(), true)];
        let e = align_truth(&report, &truth).unwrap_err();
        assert!(e.to_string().contains("overlap"), "{e}");
        let truth = [(NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(), true)];
        assert_eq!(align_truth(&report, &truth).unwrap(), (vec![true], vec![false]));
    }

    #[test]
    fn aggregate_mean_and_std() {
        let r = |f1: f64| EvalReport {
            f1: Some(f1),
            ..EvalReport::from_parts(None, None, None)
        };
        let a = aggregate(&[(1, r(0.5)), (2, r(1.0)), (3, r(0.75))]);
        let f1 = a.metrics.iter().find(|m| m.metric == "F1").unwrap();
        assert_eq!(f1.mean, Some(0.75));
        assert!((f1.std.unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(f1.n, 3);
        let mae = &a.metrics[0];
        assert_eq!((mae.mean, mae.n), (None, 0));
    }
}
