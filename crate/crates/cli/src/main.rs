//! `tsrisk`: synthesize data, train, detect anomalies, forecast, evaluate
//! and run multi-seed experiment reports.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tsrisk::anomaly::{AnomalyReport, ModeKind};
use tsrisk::config::RunConfig;
use tsrisk::data::{compute_features, load_ohlcv, synth_generate, TimeSeriesFrame};
use tsrisk::metrics::{auc, classification_metrics, EvalReport};
use tsrisk::model::Checkpoint;
use tsrisk::pipeline::{
    aggregate, align_truth, artifacts, detect_scan, forecast_accuracy, forecast_next, forecasts_csv, load_forecasts,
    load_series, load_truth, prepare, run_experiment, scan, train, write_experiment, write_json, write_text,
};
use tsrisk::risk::{RiskMode, RiskSeries};

#[derive(Parser)]
#[command(
    name = "tsrisk",
    version,
    about = "Frequency-attention forecasting, anomaly detection and risk scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic OHLCV series and its anomaly truth.
    Synth(Common),
    /// Train one model per seed.
    Train(TrainArgs),
    /// Flag anomalous days and score risk with a trained checkpoint.
    Detect(DetectArgs),
    /// Forecast the horizon after the last day of a series.
    Forecast(ForecastArgs),
    /// Score saved outputs against ground truth.
    Evaluate(EvaluateArgs),
    /// Train, detect and evaluate per seed, then aggregate.
    Report(TrainArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args, Clone)]
struct DetectorFlags {
    /// Threshold multiplier on the residual standard deviation.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Global,
    Rolling,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    detector: DetectorFlags,
    /// OHLCV CSV (overrides `data.csv`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Anomaly truth CSV (overrides `data.truth`).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    detector: DetectorFlags,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// `date,is_anomaly` CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Anomaly report JSON written by `detect`.
    #[arg(long)]
    report: PathBuf,
    /// Risk series CSV, for AUC.
    #[arg(long)]
    risk: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "classification")]
    risk_mode: RiskModeArg,
    /// Forecast CSV, for MAE/RMSE/MAPE/R2.
    #[arg(long)]
    forecasts: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RiskModeArg {
    Classification,
    Regression,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a, false),
        Command::Report(a) => cmd_train(&a, true),
        Command::Detect(a) => cmd_detect(&a),
        Command::Forecast(a) => cmd_forecast(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Config file plus command-line overrides, validated, with the output
/// directory created and the resolved configuration written into it.
#[derive(Default)]
struct Overrides<'a> {
    detector: Option<&'a DetectorFlags>,
    data: Option<&'a Path>,
    truth: Option<&'a Path>,
    /// `--seed` picks the generator seed instead of the training seed.
    synth: bool,
}

fn resolve(common: &Common, o: Overrides<'_>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = common.seed {
        if o.synth {
            cfg.synth.seed = s;
        } else {
            cfg.train.seeds = vec![s];
        }
    }
    if let Some(s) = &common.seeds {
        if s.is_empty() {
            bail!("--seeds needs at least one seed");
        }
        cfg.train.seeds = s.clone();
    }
    if let Some(d) = o.detector {
        if let Some(a) = d.alpha {
            cfg.anomaly.alpha = a;
        }
        if let Some(m) = d.mode {
            cfg.anomaly.mode = match m {
                Mode::Global => ModeKind::Global,
                Mode::Rolling => ModeKind::Rolling,
            };
        }
    }
    if let Some(d) = o.data {
        cfg.data.csv = Some(d.to_path_buf());
    }
    if let Some(t) = o.truth {
        cfg.data.truth = Some(t.to_path_buf());
    }
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output directory {}", cfg.output_dir.display()))?;
    write_text(&cfg.output_dir.join(artifacts::RESOLVED_CONFIG), &cfg.resolved_json()?)?;
    Ok(cfg)
}

fn load_frame(cfg: &RunConfig) -> Result<TimeSeriesFrame> {
    match &cfg.data.csv {
        Some(p) => {
            let (frame, cleaning) = load_ohlcv(p)?;
            if !cleaning.rejected.is_empty() {
                eprintln!(
                    "note: {} rows rejected while loading {}",
                    cleaning.rejected.len(),
                    p.display()
                );
            }
            Ok(frame)
        }
        None => Ok(synth_generate(&cfg.synth)?.frame),
    }
}

fn cmd_synth(a: &Common) -> Result<()> {
    let cfg = resolve(
        a,
        Overrides {
            synth: true,
            ..Overrides::default()
        },
    )?;
    let s = synth_generate(&cfg.synth)?;
    let data = cfg.output_dir.join("synthetic.csv");
    let truth = cfg.output_dir.join("truth.csv");
    s.frame.write_csv(&data)?;
    s.write_truth_csv(&truth)?;
    let positives = s.anomaly_mask.iter().filter(|&&m| m).count();
    println!(
        "wrote {} rows to {} and {} anomalies to {}",
        s.frame.len(),
        data.display(),
        positives,
        truth.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, full: bool) -> Result<()> {
    let cfg = resolve(
        &a.common,
        Overrides {
            detector: Some(&a.detector),
            data: a.data.as_deref(),
            truth: a.truth.as_deref(),
            synth: false,
        },
    )?;
    let (frame, truth) = load_series(&cfg)?;
    let prepared = prepare(&frame, &cfg)?;
    let seeds = cfg.train.seeds.clone();
    let dir_for = |seed: u64| {
        if seeds.len() == 1 {
            cfg.output_dir.clone()
        } else {
            cfg.output_dir.join(format!("seed-{seed}"))
        }
    };
    let mut reports = Vec::new();
    for &seed in &seeds {
        let dir = dir_for(seed);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        if full {
            let e = run_experiment(&prepared, &cfg, truth.as_deref(), seed)?;
            write_experiment(&dir, &e)?;
            println!(
                "seed {seed}: {} epochs in {:.1}s, best {}, F1 {}, RMSE {} (persistence {})",
                e.log.epochs.len(),
                e.train_seconds,
                e.log.best_epoch,
                fmt(e.report.f1),
                fmt(e.report.rmse),
                fmt(e.report.persistence_rmse)
            );
            reports.push((seed, e.report));
        } else {
            let (ck, log) = train(&prepared, &cfg, seed)?;
            ck.save(&dir.join(artifacts::CHECKPOINT))?;
            log.write(&dir.join(artifacts::TRAIN_LOG), &dir.join(artifacts::LOSS_SVG))?;
            println!(
                "seed {seed}: {} epochs, best {} (val loss {}), stop {:?}; wrote {}",
                log.epochs.len(),
                log.best_epoch,
                fmt(log.best_val_loss()),
                log.stop,
                dir.display()
            );
        }
    }
    if full {
        let agg = aggregate(&reports);
        write_json(&cfg.output_dir.join(artifacts::AGGREGATE), &agg)?;
        write_text(&cfg.output_dir.join("aggregate.csv"), &agg.to_csv())?;
        for m in &agg.metrics {
            println!("{:>10} {} ± {}", m.metric, fmt(m.mean), fmt(m.std));
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let cfg = resolve(
        &a.common,
        Overrides {
            detector: Some(&a.detector),
            data: a.data.as_deref(),
            ..Overrides::default()
        },
    )?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let frame = load_frame(&cfg)?;
    let features = compute_features(&frame, ck.features)?;
    let s = scan(&ck, &features, 0..features.len())?;
    let report = detect_scan(&s, &cfg.anomaly)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_json(&cfg.output_dir.join(artifacts::ANOMALIES), &report)?;
    s.risk.write_csv(&cfg.output_dir.join(artifacts::RISK))?;
    write_text(&cfg.output_dir.join(artifacts::FORECASTS), &forecasts_csv(&s.forecasts))?;
    println!(
        "{} of {} days flagged (theta {:.6}, alpha {}); wrote {}",
        report.flag_count(),
        report.flags.len(),
        report.theta,
        report.alpha,
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_forecast(a: &ForecastArgs) -> Result<()> {
    let cfg = resolve(
        &a.common,
        Overrides {
            data: a.data.as_deref(),
            ..Overrides::default()
        },
    )?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let frame = load_frame(&cfg)?;
    let features = compute_features(&frame, ck.features)?;
    let row = forecast_next(&ck, &features)?;
    let path = cfg.output_dir.join("forecast.csv");
    write_text(&path, &forecasts_csv(std::slice::from_ref(&row)))?;
    println!(
        "{}-step forecast after {}: first {:.4}, last {:.4}; wrote {}",
        row.predicted.len(),
        row.origin_date,
        row.predicted[0],
        row.predicted[row.predicted.len() - 1],
        path.display()
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let truth = load_truth(&a.truth)?;
    let text = std::fs::read_to_string(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let report: AnomalyReport =
        serde_json::from_str(&text).with_context(|| format!("parsing anomaly report {}", a.report.display()))?;
    let (labels, flags) = align_truth(&report, &truth)?;
    let detection = classification_metrics(&labels, &flags)?;
    let accuracy = match &a.forecasts {
        Some(p) => forecast_accuracy(&load_forecasts(p)?)?,
        None => None,
    };
    let risk_auc = match &a.risk {
        Some(p) => {
            let mode = match a.risk_mode {
                RiskModeArg::Classification => RiskMode::Classification,
                RiskModeArg::Regression => RiskMode::Regression,
            };
            let (l, s) = RiskSeries::read_csv(p, mode)?.labelled();
            if l.is_empty() {
                None
            } else {
                auc(&l, &s)?
            }
        }
        None => None,
    };
    let mut ev = EvalReport::from_parts(accuracy.as_ref().map(|x| &x.0), Some(&detection), risk_auc);
    ev.persistence_rmse = accuracy.map(|x| x.1);
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(artifacts::EVAL_JSON), &ev)?;
    write_text(&out.join(artifacts::EVAL_CSV), &ev.to_csv())?;
    print!("{}", ev.to_csv());
    Ok(())
}
