//! Frequency-enhanced attention.
//!
//! Two blocks live here:
//!
//! * [`frequency_attention`]: per head, `A = softmax(Q K^T / sqrt(d_k))`
//!   applied by matrix product to the values after they have been
//!   projected to the frequency domain, truncated to the retained modes and
//!   brought back. With every mode retained this is ordinary attention.
//! * [`frequency_enhanced_block`]: a per-channel learned spectral filter with
//!   no `Q K^T` product, costing `O(T log T)` per channel.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, ModeSelection, ModeSet, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreqAttentionConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub n_heads: usize,
    /// Retained frequency modes `M`; a value equal to the sequence length
    /// keeps every mode.
    pub modes: usize,
    #[serde(default)]
    pub mode_selection: ModeSelection,
    #[serde(default)]
    pub mode_seed: u64,
}

impl FreqAttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, modes: usize) -> Self {
        Self {
            d_model,
            d_k: d_model / n_heads.max(1),
            n_heads,
            modes,
            mode_selection: ModeSelection::Lowest,
            mode_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_k == 0 {
            return Err(Error::Config("heads and key width must be positive".into()));
        }
        if self.d_model != self.n_heads * self.d_k {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} x d_k {}",
                self.d_model, self.n_heads, self.d_k
            )));
        }
        if self.modes == 0 {
            return Err(Error::Config("at least one frequency mode is required".into()));
        }
        Ok(())
    }

    /// Mode set for sequences of length `len`; errors when `modes > len`.
    pub fn mode_set(&self, len: usize) -> Result<ModeSet> {
        self.validate()?;
        ModeSet::select(len, self.modes, self.mode_selection, self.mode_seed)
    }
}

/// Diagnostics switches for [`frequency_attention`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionOptions {
    /// Replace the softmax weights by the identity (query and key lengths
    /// must agree). Isolates the value path in tests.
    pub identity_weights: bool,
}

/// Multi-head attention over frequency-truncated values.
///
/// `q` is `Lq x d_model`; `k` and `v` are `T x d_model` and share `T` with
/// `modes`. Heads use consecutive column blocks of width `d_k` and are
/// concatenated back in order.
pub fn frequency_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    cfg: &FreqAttentionConfig,
    modes: &Rc<ModeSet>,
    opts: AttentionOptions,
) -> Result<Var> {
    cfg.validate()?;
    let (lq, dq) = g.value(q).dims();
    let (tk, dk) = g.value(k).dims();
    let (tv, dv) = g.value(v).dims();
    if dq != cfg.d_model || dk != cfg.d_model || dv != cfg.d_model {
        return Err(Error::shape(
            "frequency_attention",
            format!("widths {dq}/{dk}/{dv}, expected {}", cfg.d_model),
        ));
    }
    if tk != tv {
        return Err(Error::shape(
            "frequency_attention",
            format!("keys have {tk} steps, values {tv}"),
        ));
    }
    if modes.len() != tv {
        return Err(Error::shape(
            "frequency_attention",
            format!("mode set for {} steps, values have {tv}", modes.len()),
        ));
    }
    if opts.identity_weights && lq != tk {
        return Err(Error::shape(
            "frequency_attention",
            "identity weights need equal query and key lengths",
        ));
    }

    // Truncation is column-wise, so filtering all heads at once is equivalent.
    let v_filtered = g.spectral_filter(v, None, modes.clone())?;
    if opts.identity_weights {
        return Ok(v_filtered);
    }

    g.attention(q, k, v_filtered, cfg.n_heads, 1.0 / (cfg.d_k as f64).sqrt())
}

/// Per-channel learned spectral filter. `weights_re`/`weights_im` are
/// `modes x channels`.
pub fn frequency_enhanced_block(
    g: &mut Graph,
    x: Var,
    weights_re: Var,
    weights_im: Var,
    modes: &Rc<ModeSet>,
) -> Result<Var> {
    g.spectral_filter(x, Some((weights_re, weights_im)), modes.clone())
}

/// Evaluates [`frequency_attention`] on plain tensors.
pub fn frequency_attention_values(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &FreqAttentionConfig,
    opts: AttentionOptions,
) -> Result<Tensor> {
    let modes = Rc::new(cfg.mode_set(v.rows())?);
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = frequency_attention(&mut g, q, k, v, cfg, &modes, opts)?;
    Ok(g.value(out).clone())
}

/// Evaluates [`frequency_enhanced_block`] on plain tensors.
pub fn frequency_enhanced_values(
    x: &Tensor,
    weights_re: &Tensor,
    weights_im: &Tensor,
    modes: &ModeSet,
) -> Result<Tensor> {
    let modes = Rc::new(modes.clone());
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let (wr, wi) = (g.constant(weights_re.clone()), g.constant(weights_im.clone()));
    let out = frequency_enhanced_block(&mut g, x, wr, wi, &modes)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{fft, ifft, softmax, ComplexSpectrum, RngState};
    use std::f64::consts::PI;

    fn random(rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
        Tensor::matrix(rows, cols, rng.normals(rows * cols))
    }

    #[test]
    fn identity_weights_with_all_modes_return_values() {
        let mut rng = RngState::new(1);
        let (t, d) = (12, 4);
        let cfg = FreqAttentionConfig::new(d, 2, t);
        let (q, k, v) = (random(t, d, &mut rng), random(t, d, &mut rng), random(t, d, &mut rng));
        let out = frequency_attention_values(&q, &k, &v, &cfg, AttentionOptions { identity_weights: true }).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_values_pass_through() {
        let mut rng = RngState::new(2);
        let (t, d) = (16, 4);
        let cfg = FreqAttentionConfig::new(d, 2, 1);
        let q = random(t, d, &mut rng);
        let k = random(t, d, &mut rng);
        let v = Tensor::matrix(t, d, (0..t).flat_map(|_| [1.5, -2.0, 0.25, 7.0]).collect());
        let out = frequency_attention_values(&q, &k, &v, &cfg, AttentionOptions::default()).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    /// Step-by-step transcription for a single head with d = 1.
    fn straight_line_oracle(q: &[f64], k: &[f64], v: &[f64], modes: usize) -> Vec<f64> {
        let t = q.len();
        let spec = fft(v).unwrap();
        let mut re = vec![0.0; t];
        let mut im = vec![0.0; t];
        for f in 0..modes.min(t / 2 + 1) {
            re[f] = spec.re[f];
            im[f] = spec.im[f];
            if f != 0 {
                re[t - f] = spec.re[t - f];
                im[t - f] = spec.im[t - f];
            }
        }
        let vf = ifft(&ComplexSpectrum { re, im }).unwrap().values;
        (0..t)
            .map(|i| {
                let scores: Vec<f64> = (0..t).map(|j| q[i] * k[j]).collect();
                let a = softmax(&scores).unwrap();
                a.iter().zip(&vf).map(|(w, x)| w * x).sum()
            })
            .collect()
    }

    #[test]
    fn four_step_single_channel_matches_oracle() {
        let q = [0.5, -1.0, 2.0, 0.1];
        let k = [1.0, 0.3, -0.7, 0.2];
        let v = [3.0, -1.0, 0.5, 2.0];
        let expected = straight_line_oracle(&q, &k, &v, 2);
        let cfg = FreqAttentionConfig::new(1, 1, 2);
        let out = frequency_attention_values(
            &Tensor::column(q.to_vec()),
            &Tensor::column(k.to_vec()),
            &Tensor::column(v.to_vec()),
            &cfg,
            AttentionOptions::default(),
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn shape_and_mode_errors() {
        let cfg = FreqAttentionConfig::new(4, 2, 9);
        let x = Tensor::matrix(8, 4, vec![0.0; 32]);
        assert!(frequency_attention_values(&x, &x, &x, &cfg, AttentionOptions::default()).is_err());
        let cfg = FreqAttentionConfig::new(4, 2, 2);
        let narrow = Tensor::matrix(8, 2, vec![0.0; 16]);
        assert!(frequency_attention_values(&x, &x, &narrow, &cfg, AttentionOptions::default()).is_err());
        let bad = FreqAttentionConfig {
            d_k: 3,
            ..FreqAttentionConfig::new(4, 2, 2)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn enhanced_block_identity_and_truncation() {
        let t = 32;
        let modes = ModeSet::all(t).unwrap();
        let x = Tensor::matrix(t, 2, (0..2 * t).map(|i| ((i * 13) % 7) as f64 - 3.0).collect());
        let ones = Tensor::full(vec![modes.count(), 2], 1.0);
        let zeros = Tensor::zeros(vec![modes.count(), 2]);
        let y = frequency_enhanced_values(&x, &ones, &zeros, &modes).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-9);
        }

        // sinusoid at bin 9 with only the lowest 4 modes kept
        let sin9: Vec<f64> = (0..t).map(|s| (2.0 * PI * 9.0 * s as f64 / t as f64).sin()).collect();
        let low = ModeSet::lowest(t, 4).unwrap();
        let y = frequency_enhanced_values(
            &Tensor::column(sin9.clone()),
            &Tensor::full(vec![4, 1], 1.0),
            &Tensor::zeros(vec![4, 1]),
            &low,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));

        // two sinusoids, keep bin 3 only
        let sin3: Vec<f64> = (0..t)
            .map(|s| 0.7 * (2.0 * PI * 3.0 * s as f64 / t as f64).cos())
            .collect();
        let mixed: Vec<f64> = sin3.iter().zip(&sin9).map(|(a, b)| a + b).collect();
        let keep3 = ModeSet::from_freqs(t, vec![3]).unwrap();
        let y = frequency_enhanced_values(
            &Tensor::column(mixed),
            &Tensor::full(vec![1, 1], 1.0),
            &Tensor::zeros(vec![1, 1]),
            &keep3,
        )
        .unwrap();
        for (a, b) in y.data().iter().zip(&sin3) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
