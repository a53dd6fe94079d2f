//! Discrete Fourier transforms of arbitrary length.
//!
//! Power-of-two lengths run an iterative radix-2 Cooley-Tukey transform.
//! Every other length is computed exactly with Bluestein's chirp-z
//! algorithm on top of a power-of-two convolution, so no input is ever
//! zero-padded in a way that changes the transform.
//!
//! The forward transform is unnormalized, `X_k = sum_t x_t e^{-2 pi i k t / N}`,
//! and the inverse carries the `1/N` factor.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// A complex spectrum stored as split real/imaginary buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn from_complex(values: &[Complex64]) -> Self {
        Self {
            re: values.iter().map(|c| c.re).collect(),
            im: values.iter().map(|c| c.im).collect(),
        }
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&re, &im)| Complex64::new(re, im))
            .collect()
    }

    /// Sum of squared magnitudes over all bins.
    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).sum()
    }
}

/// Result of an inverse transform of a spectrum that is expected to be real.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseOutput {
    /// Real part of the inverse transform.
    pub values: Vec<f64>,
    /// Largest absolute imaginary component that was discarded.
    pub max_imag_residue: f64,
}

/// Forward DFT of a real signal.
pub fn fft(x: &[f64]) -> Result<ComplexSpectrum> {
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf);
    Ok(ComplexSpectrum::from_complex(&buf))
}

/// Inverse DFT, scaled by `1/N`, returning the real part.
pub fn ifft(spectrum: &ComplexSpectrum) -> Result<InverseOutput> {
    if spectrum.is_empty() {
        return Err(Error::EmptySignal);
    }
    if spectrum.re.len() != spectrum.im.len() {
        return Err(Error::shape(
            "ifft",
            format!("re has {} bins, im has {}", spectrum.re.len(), spectrum.im.len()),
        ));
    }
    let mut buf = spectrum.to_complex();
    ifft_in_place(&mut buf);
    let max_imag_residue = buf.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    Ok(InverseOutput {
        values: buf.iter().map(|c| c.re).collect(),
        max_imag_residue,
    })
}

/// Unnormalized forward transform of a complex buffer, in place.
pub fn fft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    with_plan(n, |plan| plan.forward(buf));
}

/// Inverse transform of a complex buffer in place, including the `1/N` scale.
pub fn ifft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    if n == 0 {
        return;
    }
    // ifft(x) = conj(fft(conj(x))) / N
    for c in buf.iter_mut() {
        *c = c.conj();
    }
    fft_in_place(buf);
    let scale = 1.0 / n as f64;
    for c in buf.iter_mut() {
        *c = c.conj() * scale;
    }
}

enum Plan {
    Radix2(Radix2),
    Bluestein(Bluestein),
}

impl Plan {
    fn new(n: usize) -> Self {
        if n.is_power_of_two() {
            Plan::Radix2(Radix2::new(n))
        } else {
            Plan::Bluestein(Bluestein::new(n))
        }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        match self {
            Plan::Radix2(p) => p.forward(buf),
            Plan::Bluestein(p) => p.forward(buf),
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Plan>>> = RefCell::new(HashMap::new());
}

fn with_plan<R>(n: usize, f: impl FnOnce(&Plan) -> R) -> R {
    let plan = PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| Rc::new(Plan::new(n)))
            .clone()
    });
    f(&plan)
}

struct Radix2 {
    n: usize,
    /// `e^{-2 pi i k / n}` for `k < n/2`.
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        Self { n, twiddles, bitrev }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

struct Bluestein {
    n: usize,
    m: usize,
    /// `e^{-pi i k^2 / n}` for `k < n`.
    chirp: Vec<Complex64>,
    /// Forward transform of the conjugate chirp filter, length `m`.
    filter_spectrum: Vec<Complex64>,
    inner: Radix2,
}

impl Bluestein {
    fn new(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        // k^2 mod 2n keeps the phase argument small for long transforms.
        let two_n = 2 * n as u128;
        let chirp: Vec<Complex64> = (0..n)
            .map(|k| {
                let k2 = (k as u128 * k as u128) % two_n;
                Complex64::from_polar(1.0, -PI * k2 as f64 / n as f64)
            })
            .collect();
        let inner = Radix2::new(m);
        let mut filter = vec![Complex64::new(0.0, 0.0); m];
        filter[0] = chirp[0].conj();
        for k in 1..n {
            filter[k] = chirp[k].conj();
            filter[m - k] = chirp[k].conj();
        }
        inner.forward(&mut filter);
        Self {
            n,
            m,
            chirp,
            filter_spectrum: filter,
            inner,
        }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let (n, m) = (self.n, self.m);
        let mut work = vec![Complex64::new(0.0, 0.0); m];
        for k in 0..n {
            work[k] = buf[k] * self.chirp[k];
        }
        self.inner.forward(&mut work);
        for (w, f) in work.iter_mut().zip(&self.filter_spectrum) {
            *w *= f;
        }
        // inverse of the length-m convolution via the conjugate trick
        for w in work.iter_mut() {
            *w = w.conj();
        }
        self.inner.forward(&mut work);
        let scale = 1.0 / m as f64;
        for k in 0..n {
            buf[k] = work[k].conj() * scale * self.chirp[k];
        }
    }
}
