//! File-based run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anomaly::AnomalyConfig;
use crate::data::{FeatureOptions, Split, SplitRatios, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::risk::RiskConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// OHLCV input; `None` means "use the synthetic generator".
    pub csv: Option<PathBuf>,
    /// `date,is_anomaly` ground truth for detection metrics.
    pub truth: Option<PathBuf>,
    pub split: SplitRatios,
    /// Step between consecutive training windows.
    pub train_stride: usize,
    /// Segment scanned for anomalies and scored in experiments.
    pub eval_split: Split,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: None,
            truth: None,
            split: SplitRatios::default(),
            train_stride: 1,
            eval_split: Split::Test,
        }
    }
}

/// Everything a command needs. Unknown keys are rejected and every omitted
/// field takes its default, so [`RunConfig::resolved_json`] is complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub features: FeatureOptions,
    pub model: ModelConfig,
    pub risk: RiskConfig,
    pub train: TrainConfig,
    pub anomaly: AnomalyConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            features: FeatureOptions::default(),
            model: ModelConfig::default(),
            risk: RiskConfig::default(),
            train: TrainConfig::default(),
            anomaly: AnomalyConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Checks every section; returns warnings that do not stop a run.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.data.split.validate()?;
        if self.data.train_stride == 0 {
            return Err(Error::Config("data.train_stride must be at least 1".into()));
        }
        if self.data.eval_split == Split::Val && self.data.split.val <= 0.0
            || self.data.eval_split == Split::Test && self.data.split.test <= 0.0
        {
            return Err(Error::Config(format!(
                "eval_split {:?} is empty under ratios {:?}",
                self.data.eval_split, self.data.split
            )));
        }
        if self.data.csv.is_none() {
            self.synth.validate()?;
        }
        self.model.validate()?;
        self.risk.validate()?;
        self.train.validate()?;
        self.anomaly.validate()
    }

    /// Pretty JSON with all defaults filled in.
    pub fn resolved_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_json(r#"{"model": {"d_modell": 8}}"#).unwrap_err();
        assert!(e.to_string().contains("d_modell"), "{e}");
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn resolved_round_trip_materializes_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        let text = cfg.resolved_json().unwrap();
        assert!(text.contains("\"lr0\""));
        assert!(text.contains("\"trend_window\""));
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn default_validates() {
        assert!(RunConfig::default().validate().unwrap().is_empty());
    }
}
