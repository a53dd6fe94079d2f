use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::features::{FeatureMatrix, MinMaxScaler, CLOSE, N_FEATURES, RETURN, VOLATILITY};
use crate::error::{Error, Result};

/// Auxiliary indicators fed to the risk head: mean scaled volatility and
/// mean scaled return over the most recent steps of the input window.
pub const AUX_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn train_only() -> Self {
        Self {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || self.train <= 0.0 {
            return Err(Error::Config(format!("invalid split ratios {parts:?}")));
        }
        if ((self.train + self.val + self.test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {parts:?} must sum to 1")));
        }
        Ok(())
    }

    /// Chronological row ranges for `n` rows.
    pub fn bounds(&self, n: usize) -> SplitBounds {
        let train_end = ((n as f64) * self.train).floor() as usize;
        let val_end = if self.test > 0.0 {
            ((n as f64) * (self.train + self.val)).floor() as usize
        } else {
            n
        };
        let val_end = val_end.clamp(train_end, n);
        SplitBounds {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitBounds {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub seq_len: usize,
    pub horizon: usize,
    /// Step between training windows. Validation and test windows take
    /// every origin.
    pub stride: usize,
}

impl WindowSpec {
    pub fn min_rows(&self) -> usize {
        self.seq_len + self.horizon
    }
}

/// Scaled sliding windows of one split.
///
/// Window `i` reads rows `origins[i] - seq_len .. origins[i]` as input and
/// predicts the scaled close on rows `origins[i] .. origins[i] + horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub split: Split,
    pub seq_len: usize,
    pub horizon: usize,
    /// `n x seq_len x 7`, row-major.
    pub inputs: Vec<f64>,
    /// `n x horizon`.
    pub targets: Vec<f64>,
    pub origins: Vec<usize>,
    pub aux: Vec<[f64; AUX_DIM]>,
    pub scaler: MinMaxScaler,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.seq_len * N_FEATURES;
        &self.inputs[i * w..(i + 1) * w]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.horizon..(i + 1) * self.horizon]
    }
}

/// Every split's windows plus the shared scaler and scaled rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub scaler: MinMaxScaler,
    pub bounds: SplitBounds,
    pub scaled: Vec<[f64; N_FEATURES]>,
    pub batches: Vec<WindowBatch>,
}

impl WindowSet {
    pub fn get(&self, split: Split) -> Option<&WindowBatch> {
        self.batches.iter().find(|b| b.split == split)
    }
}

/// Input block (`seq_len x 7`) for the window whose first target row is `origin`.
pub fn input_window(scaled: &[[f64; N_FEATURES]], origin: usize, seq_len: usize) -> Result<Vec<f64>> {
    if origin < seq_len || origin > scaled.len() {
        return Err(Error::InsufficientData(format!(
            "window ending before row {origin} needs {seq_len} rows of history"
        )));
    }
    Ok(scaled[origin - seq_len..origin].iter().flatten().copied().collect())
}

pub fn aux_indicators(scaled: &[[f64; N_FEATURES]], origin: usize, span: usize) -> [f64; AUX_DIM] {
    let start = origin.saturating_sub(span.max(1));
    let rows = &scaled[start..origin];
    let n = rows.len().max(1) as f64;
    [
        rows.iter().map(|r| r[VOLATILITY]).sum::<f64>() / n,
        rows.iter().map(|r| r[RETURN]).sum::<f64>() / n,
    ]
}

/// Chronological split, scaler fit on the training rows, windows built
/// inside each split.
pub fn make_windows(features: &FeatureMatrix, spec: WindowSpec, ratios: SplitRatios) -> Result<WindowSet> {
    ratios.validate()?;
    if spec.seq_len == 0 || spec.horizon == 0 || spec.stride == 0 {
        return Err(Error::Config(format!("invalid window spec {spec:?}")));
    }
    let n = features.len();
    let bounds = ratios.bounds(n);
    let need = spec.min_rows();
    let mut splits = vec![(Split::Train, bounds.train.clone())];
    if ratios.val > 0.0 {
        splits.push((Split::Val, bounds.val.clone()));
    }
    if ratios.test > 0.0 {
        splits.push((Split::Test, bounds.test.clone()));
    }
    for (split, range) in &splits {
        if range.len() < need {
            return Err(Error::InsufficientData(format!(
                "{split:?} split has {} rows; seq_len {} + horizon {} needs at least {need} \
                 (at least {} rows in total with these ratios)",
                range.len(),
                spec.seq_len,
                spec.horizon,
                min_total_rows(need, &ratios)
            )));
        }
    }

    let scaler = MinMaxScaler::fit(&features.rows[bounds.train.clone()])?;
    let scaled = scaler.scale_rows(&features.rows);
    let batches = splits
        .into_iter()
        .map(|(split, range)| {
            let mut batch = WindowBatch {
                split,
                seq_len: spec.seq_len,
                horizon: spec.horizon,
                inputs: Vec::new(),
                targets: Vec::new(),
                origins: Vec::new(),
                aux: Vec::new(),
                scaler: scaler.clone(),
            };
            let step = if split == Split::Train { spec.stride } else { 1 };
            let mut origin = range.start + spec.seq_len;
            while origin + spec.horizon <= range.end {
                batch
                    .inputs
                    .extend(scaled[origin - spec.seq_len..origin].iter().flatten());
                batch
                    .targets
                    .extend(scaled[origin..origin + spec.horizon].iter().map(|r| r[CLOSE]));
                batch.aux.push(aux_indicators(&scaled, origin, spec.horizon));
                batch.origins.push(origin);
                origin += step;
            }
            batch
        })
        .collect();
    Ok(WindowSet {
        scaler,
        bounds,
        scaled,
        batches,
    })
}

fn min_total_rows(need: usize, ratios: &SplitRatios) -> usize {
    let smallest = [ratios.train, ratios.val, ratios.test]
        .into_iter()
        .filter(|&r| r > 0.0)
        .fold(1.0, f64::min);
    (need as f64 / smallest).ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn ramp(n: usize) -> FeatureMatrix {
        let d0 = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        FeatureMatrix {
            dates: (0..n).map(|i| d0 + chrono::Days::new(i as u64)).collect(),
            rows: (0..n).map(|i| [i as f64; N_FEATURES]).collect(),
        }
    }

    #[test]
    fn single_split_window_count() {
        let spec = WindowSpec {
            seq_len: 256,
            horizon: 24,
            stride: 1,
        };
        let set = make_windows(&ramp(400), spec, SplitRatios::train_only()).unwrap();
        assert_eq!(set.batches.len(), 1);
        assert_eq!(set.get(Split::Train).unwrap().len(), 121);
    }

    #[test]
    fn scaler_fit_on_train_only() {
        let spec = WindowSpec {
            seq_len: 10,
            horizon: 5,
            stride: 1,
        };
        let set = make_windows(&ramp(100), spec, SplitRatios::default()).unwrap();
        assert_eq!(set.bounds.train, 0..70);
        assert_eq!(set.scaler.max[CLOSE], 69.0);
        let test = set.get(Split::Test).unwrap();
        // unclipped beyond the training range
        assert!(test.targets.iter().all(|&v| v > 1.0));
        for (i, &origin) in test.origins.iter().enumerate() {
            assert!(origin - 10 >= set.bounds.test.start);
            for (k, &t) in test.target(i).iter().enumerate() {
                let raw = set.scaler.unscale_value(CLOSE, t);
                assert!((raw - (origin + k) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn insufficient_rows_name_the_minimum() {
        let spec = WindowSpec {
            seq_len: 256,
            horizon: 24,
            stride: 1,
        };
        let err = make_windows(&ramp(1000), spec, SplitRatios::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("280"), "{msg}");
    }

    #[test]
    fn stride_thins_windows() {
        let spec = WindowSpec {
            seq_len: 4,
            horizon: 2,
            stride: 3,
        };
        let set = make_windows(&ramp(20), spec, SplitRatios::train_only()).unwrap();
        assert_eq!(set.get(Split::Train).unwrap().origins, vec![4, 7, 10, 13, 16]);
        let ratios = SplitRatios {
            train: 0.5,
            val: 0.5,
            test: 0.0,
        };
        let set = make_windows(&ramp(24), spec, ratios).unwrap();
        assert_eq!(set.get(Split::Train).unwrap().origins, vec![4, 7, 10]);
        assert_eq!(set.get(Split::Val).unwrap().origins, (16..=22).collect::<Vec<_>>());
    }
}
