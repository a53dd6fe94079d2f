//! The decomposed frequency-attention forecaster.
//!
//! Data flow for one window of `T` steps and `F` features, with
//! `L = T + horizon` output positions:
//!
//! 1. Trailing moving-average decomposition of every input column into
//!    trend and seasonal parts.
//! 2. Trend path: a learned `L x T` linear map of the trend close measured
//!    from its last value (added back afterwards), initialized to copy the
//!    window and hold the last trend value over the horizon.
//! 3. Seasonal path: embedding plus sinusoidal positions, then encoder layers
//!    of frequency-enhanced blocks (learned spectral filters) and a GELU
//!    feed-forward, both residual.
//! 4. Latent: per-step Gaussian `(mu, logvar)` from the final encoder state,
//!    sampled by reparameterization in training and taken at the mean
//!    otherwise; it forms the decoder memory.
//! 5. Decoder: `L` query tokens built from the relative trend extrapolation
//!    and the seasonal close cross-attend to the memory through frequency attention.
//! 6. Output: trend plus seasonal head (plus a linear skip from the seasonal
//!    close). Rows `0..T` are the reconstruction, rows `T..L` the forecast.
//!
//! The risk head reads the time-pooled latent with the auxiliary indicators.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{frequency_attention, frequency_enhanced_block, AttentionOptions, FreqAttentionConfig};
use crate::data::{FeatureOptions, MinMaxScaler, WindowBatch, CLOSE, N_FEATURES};
use crate::decomposition::DEFAULT_TREND_WINDOW;
use crate::error::{Error, Result};
use crate::numeric::{Graph, ModeSelection, ModeSet, RngState, Tensor, Var};
use crate::risk::{risk_head, RiskConfig, RiskLabeler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub horizon: usize,
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    /// Retained frequency modes.
    pub modes: usize,
    pub mode_selection: ModeSelection,
    pub mode_seed: u64,
    pub trend_window: usize,
    pub dropout_rate: f64,
    pub latent_dim: usize,
    /// Hidden width of the feed-forward sublayers.
    pub ff_dim: usize,
    /// Re-apply the moving-average decomposition after every encoder sublayer,
    /// keeping only the seasonal part.
    pub inner_decomposition: bool,
    /// Add a learned linear map from the seasonal close to the output.
    pub seasonal_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 256,
            horizon: 24,
            feature_dim: N_FEATURES,
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 1,
            modes: 32,
            mode_selection: ModeSelection::Lowest,
            mode_seed: 0,
            trend_window: DEFAULT_TREND_WINDOW,
            dropout_rate: 0.1,
            latent_dim: 32,
            ff_dim: 64,
            inner_decomposition: false,
            seasonal_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.seq_len > self.horizon && self.horizon > 0) {
            return bad(format!(
                "need seq_len > horizon > 0, got {} and {}",
                self.seq_len, self.horizon
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("d_model", self.d_model),
            ("latent_dim", self.latent_dim),
            ("ff_dim", self.ff_dim),
            ("trend_window", self.trend_window),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.feature_dim <= CLOSE {
            return bad(format!("feature_dim {} has no close column", self.feature_dim));
        }
        if self.modes > self.seq_len {
            return bad(format!("modes {} exceed seq_len {}", self.modes, self.seq_len));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> FreqAttentionConfig {
        FreqAttentionConfig {
            mode_selection: self.mode_selection,
            mode_seed: self.mode_seed,
            ..FreqAttentionConfig::new(self.d_model, self.n_heads, self.modes)
        }
    }

    /// Output positions: reconstruction plus forecast.
    pub fn out_len(&self) -> usize {
        self.seq_len + self.horizon
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite()))
    }
}

/// Parameters recorded on a graph, addressable by name.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Graph handles in [`ParamStore`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Per-length constants shared by every window: retained modes and
/// positional encodings.
pub struct ModelPlan {
    modes: Rc<ModeSet>,
    pe: Tensor,
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `horizon x 1`, scaled close.
    pub forecast: Tensor,
    /// `seq_len x 1`, scaled close.
    pub reconstruction: Tensor,
    /// `seq_len x latent_dim`; equals `latent_mu` outside training.
    pub latent: Tensor,
    pub latent_mu: Tensor,
    pub latent_logvar: Tensor,
    pub risk_score: f64,
}

/// Graph handles produced by [`ForecastModel::trace`].
#[derive(Debug, Clone, Copy)]
pub struct Traced {
    pub forecast: Var,
    pub reconstruction: Var,
    pub latent: Var,
    pub mu: Var,
    pub logvar: Var,
    pub risk_score: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub risk: RiskConfig,
    pub params: ParamStore,
}

fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data)
}

/// Reparameterized draw `mu + exp(logvar / 2) * eps` in training, `mu` otherwise.
pub fn latent_sample(mu: &[f64], logvar: &[f64], rng: &mut RngState, training: bool) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() {
        return Err(Error::shape(
            "latent_sample",
            format!("{} means vs {} log-variances", mu.len(), logvar.len()),
        ));
    }
    if !training {
        return Ok(mu.to_vec());
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m + (0.5 * lv).exp() * rng.normal())
        .collect())
}

/// Inverted-dropout mask: each entry kept with probability `1 - p` and
/// scaled by `1 / (1 - p)`.
pub fn dropout_mask(n: usize, p: f64, rng: &mut RngState) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect()
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut RngState,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) {
        let data = (0..rows * cols).map(|_| std * self.rng.normal()).collect();
        self.store.push(name, vec![rows, cols], data);
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.store.push(name, vec![rows, cols], vec![0.0; rows * cols]);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.normal(&format!("{prefix}.w"), fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
        self.zeros(&format!("{prefix}.b"), 1, fan_out);
    }
}

impl ForecastModel {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, risk: RiskConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        risk.validate()?;
        let c = &config;
        let (t, l, d) = (c.seq_len, c.out_len(), c.d_model);
        let n_modes = c.attention().mode_set(t)?.count();
        let mut rng = RngState::new(seed);
        let mut init = Init {
            store: ParamStore::default(),
            rng: &mut rng,
        };

        init.linear("embed", c.feature_dim, d);
        for i in 0..c.n_encoder_layers {
            let p = format!("encoder.{i}");
            init.linear(&format!("{p}.in"), d, d);
            let re: Vec<f64> = (0..n_modes * d).map(|_| 1.0 + 0.02 * init.rng.normal()).collect();
            init.store.push(format!("{p}.filter.re"), vec![n_modes, d], re);
            init.normal(&format!("{p}.filter.im"), n_modes, d, 0.02);
            init.linear(&format!("{p}.out"), d, d);
            init.linear(&format!("{p}.ff1"), d, c.ff_dim);
            init.linear(&format!("{p}.ff2"), c.ff_dim, d);
        }
        init.linear("latent.mu", d, c.latent_dim);
        init.linear("latent.logvar", d, c.latent_dim);
        init.linear("memory", c.latent_dim, d);
        init.linear("decoder.seed", 2, d);
        for i in 0..c.n_decoder_layers {
            let p = format!("decoder.{i}");
            for part in ["query", "key", "value", "out"] {
                init.linear(&format!("{p}.{part}"), d, d);
            }
            init.linear(&format!("{p}.ff1"), d, c.ff_dim);
            init.linear(&format!("{p}.ff2"), c.ff_dim, d);
        }
        init.normal("head.w", d, 1, 0.1 / (d as f64).sqrt());
        init.zeros("head.b", 1, 1);

        // copy the window, then hold the last trend value
        let mut trend = vec![0.0; l * t];
        for r in 0..l {
            trend[r * t + r.min(t - 1)] = 1.0;
        }
        init.store.push("trend.w", vec![l, t], trend);
        init.zeros("trend.b", l, 1);
        if c.seasonal_skip {
            init.zeros("skip.w", l, t);
        }

        for (i, (fan_in, fan_out)) in risk.layer_shapes(c.latent_dim).into_iter().enumerate() {
            init.linear(&format!("risk.{i}"), fan_in, fan_out);
        }
        Ok(Self {
            config,
            risk,
            params: init.store,
        })
    }

    pub fn plan(&self) -> Result<ModelPlan> {
        let c = &self.config;
        Ok(ModelPlan {
            modes: Rc::new(c.attention().mode_set(c.seq_len)?),
            pe: sinusoidal_positions(c.out_len(), c.d_model),
        })
    }

    /// Records every parameter on `g`; `trainable` marks them for gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .param_tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        self.bind_vars(&vars).expect("one handle per parameter")
    }

    /// Addresses caller-recorded handles, one per parameter in store order.
    /// Used by gradient checks, which record perturbed copies themselves.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "bind_vars",
                format!("{} handles for {} parameters", vars.len(), self.params.len()),
            ));
        }
        let index = self
            .params
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Ok(Bound {
            vars: vars.to_vec(),
            index,
        })
    }

    /// Parameter values as graph-ready matrices, in store order.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params
            .entries()
            .iter()
            .map(|e| {
                let (rows, cols) = match e.shape.as_slice() {
                    [r, c] => (*r, *c),
                    [n] => (1, *n),
                    _ => (1, e.data.len()),
                };
                Tensor::matrix(rows, cols, e.data.clone())
            })
            .collect()
    }

    fn check_input(&self, input: &[f64], aux: &[f64]) -> Result<()> {
        let c = &self.config;
        if input.len() != c.seq_len * c.feature_dim {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} input values for a {}x{} window",
                    input.len(),
                    c.seq_len,
                    c.feature_dim
                ),
            ));
        }
        if aux.len() != self.risk.aux_dim {
            return Err(Error::shape(
                "forward",
                format!("{} auxiliary values, expected {}", aux.len(), self.risk.aux_dim),
            ));
        }
        if input.iter().chain(aux).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }
        Ok(())
    }

    /// Records the forward pass of one window (`seq_len x feature_dim`,
    /// row-major) on `g`. `rng` supplies dropout masks and latent noise and
    /// is only drawn from when `training` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn trace(
        &self,
        g: &mut Graph,
        p: &Bound,
        plan: &ModelPlan,
        input: &[f64],
        aux: &[f64],
        training: bool,
        rng: &mut RngState,
    ) -> Result<Traced> {
        self.check_input(input, aux)?;
        let c = &self.config;
        let (t, k, l) = (c.seq_len, c.horizon, c.out_len());
        let drop = training && c.dropout_rate > 0.0;

        let linear = |g: &mut Graph, x: Var, prefix: &str| -> Result<Var> {
            let y = g.matmul(x, p.var(&format!("{prefix}.w"))?)?;
            g.add_row(y, p.var(&format!("{prefix}.b"))?)
        };
        let dropout = |g: &mut Graph, x: Var, rng: &mut RngState| -> Result<Var> {
            if !drop {
                return Ok(x);
            }
            let n = g.value(x).numel();
            let mask = dropout_mask(n, c.dropout_rate, rng);
            g.mul_const(x, mask)
        };
        let feed_forward = |g: &mut Graph, x: Var, prefix: &str, rng: &mut RngState| -> Result<Var> {
            let h = linear(g, x, &format!("{prefix}.ff1"))?;
            let h = g.gelu(h);
            let h = linear(g, h, &format!("{prefix}.ff2"))?;
            let h = dropout(g, h, rng)?;
            g.add(x, h)
        };
        let seasonal_only = |g: &mut Graph, x: Var| -> Result<Var> {
            if !c.inner_decomposition {
                return Ok(x);
            }
            let trend = g.moving_average(x, c.trend_window)?;
            g.sub(x, trend)
        };

        let x = g.constant(Tensor::matrix(t, c.feature_dim, input.to_vec()));
        let trend = g.moving_average(x, c.trend_window)?;
        let seasonal = g.sub(x, trend)?;
        let trend_close = g.slice_cols(trend, CLOSE, CLOSE + 1)?;
        let seasonal_close = g.slice_cols(seasonal, CLOSE, CLOSE + 1)?;

        // trend path, relative to the last trend value so the learned map
        // never sees the absolute level
        let anchor = g.value(trend_close).at(t - 1, 0);
        let trend_rel = g.add_scalar(trend_close, -anchor);
        let trend_rel = g.matmul(p.var("trend.w")?, trend_rel)?;
        let trend_rel = g.add(trend_rel, p.var("trend.b")?)?;
        let trend_out = g.add_scalar(trend_rel, anchor);

        // encoder over the seasonal features
        let pe = g.constant(plan.pe.clone());
        let pe_t = g.slice_rows(pe, 0, t)?;
        let mut h = linear(g, seasonal, "embed")?;
        h = g.add(h, pe_t)?;
        for i in 0..c.n_encoder_layers {
            let pre = format!("encoder.{i}");
            let a = linear(g, h, &format!("{pre}.in"))?;
            let a = frequency_enhanced_block(
                g,
                a,
                p.var(&format!("{pre}.filter.re"))?,
                p.var(&format!("{pre}.filter.im"))?,
                &plan.modes,
            )?;
            let a = linear(g, a, &format!("{pre}.out"))?;
            let a = dropout(g, a, rng)?;
            h = g.add(h, a)?;
            h = seasonal_only(g, h)?;
            h = feed_forward(g, h, &pre, rng)?;
            h = seasonal_only(g, h)?;
        }

        // latent Gaussian
        let mu = linear(g, h, "latent.mu")?;
        let logvar = linear(g, h, "latent.logvar")?;
        let z = if training {
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let eps = rng.normals(t * c.latent_dim);
            let noise = g.mul_const(std, eps)?;
            g.add(mu, noise)?
        } else {
            mu
        };
        let memory = linear(g, z, "memory")?;
        let memory = g.add(memory, pe_t)?;

        // decoder seeded with the relative trend extrapolation and the seasonal close
        let pad = g.constant(Tensor::zeros(vec![k, 1]));
        let seasonal_init = g.concat_rows(&[seasonal_close, pad])?;
        let seed = g.concat_cols(&[trend_rel, seasonal_init])?;
        let mut hd = linear(g, seed, "decoder.seed")?;
        hd = g.add(hd, pe)?;
        let att = c.attention();
        for i in 0..c.n_decoder_layers {
            let pre = format!("decoder.{i}");
            let q = linear(g, hd, &format!("{pre}.query"))?;
            let kk = linear(g, memory, &format!("{pre}.key"))?;
            let v = linear(g, memory, &format!("{pre}.value"))?;
            let a = frequency_attention(g, q, kk, v, &att, &plan.modes, AttentionOptions::default())?;
            let a = linear(g, a, &format!("{pre}.out"))?;
            let a = dropout(g, a, rng)?;
            hd = g.add(hd, a)?;
            hd = feed_forward(g, hd, &pre, rng)?;
        }
        let mut season_out = linear(g, hd, "head")?;
        if c.seasonal_skip {
            let skip = g.matmul(p.var("skip.w")?, seasonal_close)?;
            season_out = g.add(season_out, skip)?;
        }
        let y = g.add(trend_out, season_out)?;
        let reconstruction = g.slice_rows(y, 0, t)?;
        let forecast = g.slice_rows(y, t, l)?;

        let pooled = g.mean_rows(z);
        let aux_v = g.constant(Tensor::row(aux.to_vec()));
        let layers = (0..self.risk.hidden.len() + 1)
            .map(|i| Ok((p.var(&format!("risk.{i}.w"))?, p.var(&format!("risk.{i}.b"))?)))
            .collect::<Result<Vec<_>>>()?;
        let risk_score = risk_head(g, pooled, aux_v, &layers, self.risk.risk_mode)?;

        Ok(Traced {
            forecast,
            reconstruction,
            latent: z,
            mu,
            logvar,
            risk_score,
        })
    }

    /// Forward pass of one window.
    pub fn forward(&self, input: &[f64], aux: &[f64], training: bool, rng: &mut RngState) -> Result<ForwardOutput> {
        let plan = self.plan()?;
        self.forward_with(&plan, input, aux, training, rng)
    }

    pub fn forward_with(
        &self,
        plan: &ModelPlan,
        input: &[f64],
        aux: &[f64],
        training: bool,
        rng: &mut RngState,
    ) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let tr = self.trace(&mut g, &p, plan, input, aux, training, rng)?;
        let out = ForwardOutput {
            forecast: g.value(tr.forecast).clone(),
            reconstruction: g.value(tr.reconstruction).clone(),
            latent: g.value(tr.latent).clone(),
            latent_mu: g.value(tr.mu).clone(),
            latent_logvar: g.value(tr.logvar).clone(),
            risk_score: g.scalar(tr.risk_score),
        };
        let finite = [&out.forecast, &out.reconstruction, &out.latent_mu, &out.latent_logvar]
            .iter()
            .all(|t| t.is_finite())
            && out.risk_score.is_finite();
        if !finite {
            return Err(Error::NonFinite("model output"));
        }
        Ok(out)
    }

    /// Forward pass over every window of a batch. Window `i` draws from the
    /// substream `i` of `seed`.
    pub fn forward_batch(&self, batch: &WindowBatch, training: bool, seed: u64) -> Result<Vec<ForwardOutput>> {
        if batch.seq_len != self.config.seq_len || batch.horizon != self.config.horizon {
            return Err(Error::shape(
                "forward_batch",
                format!(
                    "batch windows {}+{}, model {}+{}",
                    batch.seq_len, batch.horizon, self.config.seq_len, self.config.horizon
                ),
            ));
        }
        let plan = self.plan()?;
        (0..batch.len())
            .map(|i| {
                let mut rng = RngState::derive(seed, i as u64);
                self.forward_with(&plan, batch.input(i), &batch.aux[i], training, &mut rng)
            })
            .collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "tsrisk-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to apply a trained model to new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub features: FeatureOptions,
    pub scaler: MinMaxScaler,
    pub labeler: Option<RiskLabeler>,
    pub model: ForecastModel,
}

impl Checkpoint {
    pub fn new(
        model: ForecastModel,
        features: FeatureOptions,
        scaler: MinMaxScaler,
        labeler: Option<RiskLabeler>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            features,
            scaler,
            labeler,
            model,
        }
    }

    /// JSON encoding; every float round-trips bit-exactly.
    pub fn to_json(&self) -> Result<String> {
        if !self.model.params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.model.config.validate()?;
        let expected = ForecastModel::new(ck.model.config.clone(), ck.model.risk.clone(), 0)?;
        let shapes = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
            s.entries().iter().map(|e| (e.name.clone(), e.shape.clone())).collect()
        };
        if shapes(&expected.params) != shapes(&ck.model.params)
            || ck
                .model
                .params
                .entries()
                .iter()
                .any(|e| e.data.len() != e.shape.iter().product::<usize>())
        {
            return Err(Error::Checkpoint(
                "parameter layout does not match the configuration".into(),
            ));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            seq_len: 32,
            horizon: 8,
            d_model: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            modes: 4,
            trend_window: 5,
            latent_dim: 16,
            ff_dim: 16,
            ..ModelConfig::default()
        }
    }

    fn window(cfg: &ModelConfig, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = RngState::new(seed);
        let x = (0..cfg.seq_len * cfg.feature_dim).map(|_| rng.uniform()).collect();
        (x, vec![rng.uniform(), rng.uniform()])
    }

    #[test]
    fn shapes() {
        let cfg = tiny();
        let m = ForecastModel::new(cfg.clone(), RiskConfig::default(), 1).unwrap();
        let (x, aux) = window(&cfg, 2);
        let out = m.forward(&x, &aux, false, &mut RngState::new(0)).unwrap();
        assert_eq!(out.forecast.dims(), (8, 1));
        assert_eq!(out.reconstruction.dims(), (32, 1));
        assert_eq!(out.latent.dims(), (32, 16));
        assert!(out.risk_score > 0.0 && out.risk_score < 1.0);
        assert_eq!(out.latent, out.latent_mu);
    }

    #[test]
    fn inference_is_deterministic() {
        let cfg = tiny();
        let m = ForecastModel::new(cfg.clone(), RiskConfig::default(), 1).unwrap();
        let (x, aux) = window(&cfg, 3);
        let a = m.forward(&x, &aux, false, &mut RngState::new(0)).unwrap();
        let b = m.forward(&x, &aux, false, &mut RngState::new(99)).unwrap();
        assert_eq!(a, b);
        let zero = vec![0.0; x.len()];
        let z = m.forward(&zero, &[0.0, 0.0], false, &mut RngState::new(0)).unwrap();
        assert!(z.forecast.is_finite());
    }

    #[test]
    fn training_mode_draws_noise() {
        let cfg = tiny();
        let m = ForecastModel::new(cfg.clone(), RiskConfig::default(), 1).unwrap();
        let (x, aux) = window(&cfg, 3);
        let a = m.forward(&x, &aux, true, &mut RngState::new(5)).unwrap();
        let b = m.forward(&x, &aux, true, &mut RngState::new(5)).unwrap();
        let c = m.forward(&x, &aux, true, &mut RngState::new(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.forecast, c.forecast);
        assert_ne!(a.latent, a.latent_mu);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = tiny();
        let m = ForecastModel::new(cfg.clone(), RiskConfig::default(), 1).unwrap();
        let (mut x, aux) = window(&cfg, 3);
        assert!(m.forward(&x[1..], &aux, false, &mut RngState::new(0)).is_err());
        x[4] = f64::NAN;
        assert!(m.forward(&x, &aux, false, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.horizon = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn latent_sample_cases() {
        let mut rng = RngState::new(1);
        assert_eq!(latent_sample(&[0.5], &[0.0], &mut rng, false).unwrap(), vec![0.5]);
        let s = latent_sample(&[0.5], &[-80.0], &mut rng, true).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_rate() {
        let mut rng = RngState::new(3);
        let m = dropout_mask(100_000, 0.1, &mut rng);
        let zeros = m.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.1).abs() < 0.005);
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0 / 0.9));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = tiny();
        let m = ForecastModel::new(cfg, RiskConfig::default(), 4).unwrap();
        let scaler = MinMaxScaler {
            min: vec![0.1; N_FEATURES],
            max: vec![1.0 / 3.0; N_FEATURES],
        };
        let ck = Checkpoint::new(m, FeatureOptions::default(), scaler, None);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in ck.model.params.entries().iter().zip(back.model.params.entries()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
