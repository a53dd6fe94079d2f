//! Forecast and detection metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Mean absolute percentage error in percent, over nonzero targets.
    pub mape_pct: f64,
    /// `None` when the targets are constant.
    pub r2: Option<f64>,
    /// Targets equal to zero that were left out of MAPE.
    pub mape_skipped: usize,
    pub n: usize,
}

pub fn regression_metrics(y: &[f64], y_hat: &[f64]) -> Result<RegressionMetrics> {
    if y.len() != y_hat.len() {
        return Err(Error::shape(
            "regression_metrics",
            format!("{} targets vs {} predictions", y.len(), y_hat.len()),
        ));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("regression_metrics"));
    }
    let n = y.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut pct_n = 0usize;
    for (&a, &p) in y.iter().zip(y_hat) {
        let e = a - p;
        abs += e.abs();
        sq += e * e;
        if a != 0.0 {
            pct += (e / a).abs();
            pct_n += 1;
        }
    }
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - sq / ss_tot);
    Ok(RegressionMetrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape_pct: if pct_n > 0 {
            100.0 * pct / pct_n as f64
        } else {
            f64::NAN
        },
        r2,
        mape_skipped: y.len() - pct_n,
        n: y.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_flags(labels: &[bool], flags: &[bool]) -> Result<Self> {
        if labels.len() != flags.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} labels vs {} flags", labels.len(), flags.len()),
            ));
        }
        let mut c = Self::default();
        for (&l, &f) in labels.iter().zip(flags) {
            match (l, f) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// Zero when nothing was flagged.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Zero when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

pub fn classification_metrics(labels: &[bool], flags: &[bool]) -> Result<ClassificationMetrics> {
    let counts = ConfusionCounts::from_flags(labels, flags)?;
    Ok(ClassificationMetrics {
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        counts,
    })
}

/// Flags every score at or above `threshold`, then scores the flags.
pub fn classification_from_scores(labels: &[bool], scores: &[f64], threshold: f64) -> Result<ClassificationMetrics> {
    let flags: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    classification_metrics(labels, &flags)
}

/// Area under the ROC curve via the Mann-Whitney rank statistic, with tied
/// scores sharing their average rank (a tie counts one half). `None` when
/// either class is absent.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<Option<f64>> {
    if labels.len() != scores.len() {
        return Err(Error::shape(
            "auc",
            format!("{} labels vs {} scores", labels.len(), scores.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the mean rank
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                pos_rank_sum += mean_rank;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(Some(u / (p * q)))
}

/// Every evaluation metric in one record, in the order of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape_pct: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub r2: Option<f64>,
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Number of evaluated detection steps.
    pub n: usize,
    /// RMSE of the last-observed-value forecast on the same targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persistence_rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 8] = ["MAE", "RMSE", "MAPE(%)", "Precision", "Recall", "F1", "R2", "AUC"];

    pub fn from_parts(
        regression: Option<&RegressionMetrics>,
        detection: Option<&ClassificationMetrics>,
        risk_auc: Option<f64>,
    ) -> Self {
        let counts = detection.map(|d| d.counts).unwrap_or_default();
        let mut notes = Vec::new();
        if let Some(r) = regression {
            if r.r2.is_none() {
                notes.push("R2 undefined: constant targets".into());
            }
            if r.mape_skipped > 0 {
                notes.push(format!("MAPE skipped {} zero targets", r.mape_skipped));
            }
        }
        Self {
            mae: regression.map(|r| r.mae),
            rmse: regression.map(|r| r.rmse),
            mape_pct: regression.map(|r| r.mape_pct).filter(|v| v.is_finite()),
            precision: detection.map(|d| d.precision),
            recall: detection.map(|d| d.recall),
            f1: detection.map(|d| d.f1),
            r2: regression.and_then(|r| r.r2),
            auc: risk_auc,
            tp: counts.tp,
            fp: counts.fp,
            fn_: counts.fn_,
            tn: counts.tn,
            n: counts.tp + counts.fp + counts.fn_ + counts.tn,
            persistence_rmse: None,
            notes,
        }
    }

    /// Metric values in table order.
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.mae,
            self.rmse,
            self.mape_pct,
            self.precision,
            self.recall,
            self.f1,
            self.r2,
            self.auc,
        ]
    }

    /// Header line plus one data row; undefined metrics print as `NaN`.
    pub fn to_csv(&self) -> String {
        let row: Vec<String> = self
            .values()
            .iter()
            .map(|v| match v {
                Some(x) => format!("{x}"),
                None => "NaN".to_string(),
            })
            .collect();
        format!("{}\n{}\n", Self::CSV_HEADER.join(","), row.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_regression() {
        let y = [1.0, 2.0, 4.0];
        let m = regression_metrics(&y, &y).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape_pct, m.r2), (0.0, 0.0, 0.0, Some(1.0)));
    }

    #[test]
    fn regression_hand_case() {
        let m = regression_metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!((m.mae - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.rmse - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((m.rmse - 0.8165).abs() < 1e-4);
        // predicting the mean gives zero explained variance
        assert_eq!(m.r2, Some(0.0));
    }

    #[test]
    fn constant_targets_leave_r2_undefined() {
        let m = regression_metrics(&[2.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!(m.r2.is_none());
        let m = regression_metrics(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert_eq!(m.mape_skipped, 1);
        assert!((m.mape_pct - 50.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_hand_case() {
        let labels = [true, true, false, false];
        let flags = [true, false, true, false];
        let m = classification_metrics(&labels, &flags).unwrap();
        assert_eq!(
            m.counts,
            ConfusionCounts {
                tp: 1,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        let perfect = classification_metrics(&labels, &labels).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_denominators() {
        let m = classification_metrics(&[false, false], &[false, false]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn auc_cases() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&labels, &[0.1, 0.2, 0.8, 0.9]).unwrap(), Some(1.0));
        assert_eq!(auc(&labels, &[0.9, 0.8, 0.2, 0.1]).unwrap(), Some(0.0));
        assert_eq!(auc(&labels, &[0.5; 4]).unwrap(), Some(0.5));
        assert_eq!(auc(&[true, true], &[0.1, 0.2]).unwrap(), None);
    }

    #[test]
    fn csv_row_has_eight_columns() {
        let r = EvalReport::from_parts(None, None, None);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "MAE,RMSE,MAPE(%),Precision,Recall,F1,R2,AUC");
        assert_eq!(lines[1].split(',').count(), 8);
    }
}
