//! OHLCV ingestion, feature construction, scaling, windowing and synthetic
//! series generation.

pub mod features;
pub mod frame;
pub mod synth;
pub mod windows;

pub use features::{
    compute_features, parkinson_volatility, FeatureMatrix, FeatureOptions, MinMaxScaler, CLOSE, FEATURE_NAMES,
    N_FEATURES, RETURN, VOLATILITY,
};
pub use frame::{load_ohlcv, CleaningReport, RejectedRow, TimeSeriesFrame, OHLCV_HEADER};
pub use synth::{business_days, synth_generate, Sinusoid, SynthConfig, SyntheticSeries};
pub use windows::{
    aux_indicators, input_window, make_windows, Split, SplitBounds, SplitRatios, WindowBatch, WindowSet, WindowSpec,
    AUX_DIM,
};
