//! Column-wise spectral filtering kernels shared by the autodiff graph.
//!
//! A filter keeps a set of frequency modes `f` in `0..=N/2`, multiplies each
//! retained mode by a complex weight and returns the real part of the
//! inverse transform. Mode `f` covers both bins `f` and `N - f`, the latter
//! with the conjugate weight, so the output of a real input is real.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::fft::{fft_in_place, ifft_in_place};
use super::rng::RngState;
use crate::error::{Error, Result};

/// How the retained frequency modes are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSelection {
    /// DC plus the next `M - 1` lowest frequencies.
    #[default]
    Lowest,
    /// DC plus `M - 1` frequencies drawn with a seeded RNG.
    SeededRandom,
}

/// Retained frequency modes for signals of a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSet {
    len: usize,
    freqs: Vec<usize>,
}

impl ModeSet {
    /// Number of distinct real-signal frequencies for length `n`.
    pub fn max_modes(n: usize) -> usize {
        n / 2 + 1
    }

    /// Every mode; the filter is then a lossless round trip.
    pub fn all(len: usize) -> Result<Self> {
        Self::lowest(len, len)
    }

    pub fn lowest(len: usize, modes: usize) -> Result<Self> {
        Self::validate(len, modes)?;
        let m = modes.min(Self::max_modes(len));
        Ok(Self {
            len,
            freqs: (0..m).collect(),
        })
    }

    pub fn seeded_random(len: usize, modes: usize, seed: u64) -> Result<Self> {
        Self::validate(len, modes)?;
        let total = Self::max_modes(len);
        if modes >= total {
            return Self::lowest(len, modes);
        }
        let mut rest: Vec<usize> = (1..total).collect();
        RngState::new(seed).shuffle(&mut rest);
        let mut freqs = vec![0];
        freqs.extend_from_slice(&rest[..modes - 1]);
        freqs.sort_unstable();
        Ok(Self { len, freqs })
    }

    pub fn select(len: usize, modes: usize, selection: ModeSelection, seed: u64) -> Result<Self> {
        match selection {
            ModeSelection::Lowest => Self::lowest(len, modes),
            ModeSelection::SeededRandom => Self::seeded_random(len, modes, seed),
        }
    }

    /// Explicit frequency list; each entry must lie in `0..=len/2`.
    pub fn from_freqs(len: usize, mut freqs: Vec<usize>) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptySignal);
        }
        freqs.sort_unstable();
        freqs.dedup();
        if freqs.is_empty() || freqs.iter().any(|&f| f > len / 2) {
            return Err(Error::Config(format!("frequencies {freqs:?} invalid for length {len}")));
        }
        Ok(Self { len, freqs })
    }

    fn validate(len: usize, modes: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::EmptySignal);
        }
        if modes == 0 {
            return Err(Error::Config("at least one frequency mode is required".into()));
        }
        if modes > len {
            return Err(Error::Config(format!("{modes} modes exceed sequence length {len}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freqs(&self) -> &[usize] {
        &self.freqs
    }

    pub fn count(&self) -> usize {
        self.freqs.len()
    }

    /// Multiplicity of mode `f` in the real inverse transform.
    fn weight_of(&self, f: usize) -> f64 {
        if f == 0 || 2 * f == self.len {
            1.0
        } else {
            2.0
        }
    }
}

/// Complex per-mode, per-column weights, stored as two `modes x cols` blocks.
pub(crate) struct FilterWeights<'a> {
    pub re: &'a [f64],
    pub im: &'a [f64],
}

/// Forward filter of every column of a row-major `len x cols` block.
///
/// Returns the output and the retained input spectra (`modes x cols`), which
/// the backward pass needs for the weight gradient.
pub(crate) fn filter_forward(
    x: &[f64],
    cols: usize,
    modes: &ModeSet,
    weights: Option<FilterWeights<'_>>,
) -> (Vec<f64>, Vec<Complex64>) {
    let n = modes.len;
    let m = modes.count();
    let mut y = vec![0.0; n * cols];
    let mut kept = vec![Complex64::new(0.0, 0.0); m * cols];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..cols {
        for t in 0..n {
            buf[t] = Complex64::new(x[t * cols + c], 0.0);
        }
        fft_in_place(&mut buf);
        out.fill(Complex64::new(0.0, 0.0));
        for (j, &f) in modes.freqs.iter().enumerate() {
            let xf = buf[f];
            kept[j * cols + c] = xf;
            let z = match &weights {
                Some(w) => xf * Complex64::new(w.re[j * cols + c], w.im[j * cols + c]),
                None => xf,
            };
            out[f] = z;
            if f != 0 && 2 * f != n {
                out[n - f] = z.conj();
            }
        }
        ifft_in_place(&mut out);
        for t in 0..n {
            y[t * cols + c] = out[t].re;
        }
    }
    (y, kept)
}

/// Adjoint of [`filter_forward`].
///
/// Accumulates into `dx` (`len x cols`) and, when weights are present, into
/// `dw_re`/`dw_im` (`modes x cols`).
pub(crate) fn filter_backward(
    dy: &[f64],
    cols: usize,
    modes: &ModeSet,
    kept: &[Complex64],
    weights: Option<FilterWeights<'_>>,
    dx: Option<&mut [f64]>,
    dw: Option<(&mut [f64], &mut [f64])>,
) {
    let n = modes.len;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    let mut dx = dx;
    let mut dw = dw;
    for c in 0..cols {
        for t in 0..n {
            buf[t] = Complex64::new(dy[t * cols + c], 0.0);
        }
        fft_in_place(&mut buf);
        spec.fill(Complex64::new(0.0, 0.0));
        for (j, &f) in modes.freqs.iter().enumerate() {
            // dL/dZ_f for Z_f = w_f X_f
            let g = buf[f] * (modes.weight_of(f) / n as f64);
            let w = match &weights {
                Some(w) => Complex64::new(w.re[j * cols + c], w.im[j * cols + c]),
                None => Complex64::new(1.0, 0.0),
            };
            if let Some((dre, dim)) = dw.as_mut() {
                let xf = kept[j * cols + c];
                dre[j * cols + c] += g.re * xf.re + g.im * xf.im;
                dim[j * cols + c] += g.im * xf.re - g.re * xf.im;
            }
            spec[f] = g * w.conj();
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dx_t = sum_f Re(GX_f e^{+2 pi i f t / N}) = N Re(ifft(GX))_t
            ifft_in_place(&mut spec);
            let scale = n as f64;
            for t in 0..n {
                dx[t * cols + c] += spec[t].re * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn mode_counts() {
        assert_eq!(ModeSet::lowest(8, 3).unwrap().freqs(), &[0, 1, 2]);
        assert_eq!(ModeSet::all(8).unwrap().count(), 5);
        assert_eq!(ModeSet::all(7).unwrap().count(), 4);
        assert!(ModeSet::lowest(8, 9).is_err());
        assert!(ModeSet::lowest(8, 0).is_err());
        let r = ModeSet::seeded_random(64, 6, 3).unwrap();
        assert_eq!(r.count(), 6);
        assert_eq!(r.freqs()[0], 0);
        assert_eq!(r, ModeSet::seeded_random(64, 6, 3).unwrap());
    }

    #[test]
    fn full_filter_is_identity() {
        for n in [5usize, 8, 12] {
            let x: Vec<f64> = (0..n * 2).map(|i| (i as f64 * 0.71).cos()).collect();
            let (y, _) = filter_forward(&x, 2, &ModeSet::all(n).unwrap(), None);
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncation_keeps_one_sinusoid() {
        let n = 32;
        let x: Vec<f64> = (0..n)
            .map(|t| {
                let t = t as f64;
                (2.0 * PI * 2.0 * t / n as f64).sin() + 0.5 * (2.0 * PI * 9.0 * t / n as f64).cos()
            })
            .collect();
        let modes = ModeSet::from_freqs(n, vec![2]).unwrap();
        let (y, _) = filter_forward(&x, 1, &modes, None);
        for (t, v) in y.iter().enumerate() {
            let want = (2.0 * PI * 2.0 * t as f64 / n as f64).sin();
            assert!((v - want).abs() < 1e-12);
        }
    }
}
