//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every value on the tape is treated as a `rows x cols` matrix. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order for backpropagation.

use std::rc::Rc;

use num_complex::Complex64;

use super::spectral::{filter_backward, filter_forward, FilterWeights, ModeSet};
use super::tensor::{gemm, gemm_view, Tensor, View};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Tanh,
    Sigmoid,
    Exp,
    Abs,
    Square,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Rc<Vec<f64>>),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Unary(Var, Activation),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MovingAverage(Var, usize),
    Spectral {
        x: Var,
        weights: Option<(Var, Var)>,
        modes: Rc<ModeSet>,
        kept: Vec<Complex64>,
    },
    Bce(Var, Rc<Vec<f64>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        /// Softmax weights, `heads` blocks of `Lq x T`.
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const BCE_CLAMP: f64 = 1e-12;

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last `backward` call, if the node tracked one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.tracks(p));
        let value = Tensor::matrix(rows, cols, data).with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        let (r, c) = self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(r, c, data, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(Error::shape("add_row", format!("{:?} row for {r}x{c}", self.dims(row))));
        }
        let b = self.data(row);
        let data = self
            .data(a)
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(r, c, data, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let data = self.data(a).iter().map(|x| x * k).collect();
        self.push(r, c, data, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let data = self.data(a).iter().map(|x| x + k).collect();
        self.push(r, c, data, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a constant array (dropout masks, noise draws).
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if k.len() != r * c {
            return Err(Error::shape("mul_const", format!("{} values for {r}x{c}", k.len())));
        }
        let data = self.data(a).iter().zip(&k).map(|(x, y)| x * y).collect();
        Ok(self.push(r, c, data, Op::MulConst(a, Rc::new(k)), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        Ok(self.push(m, n, out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(a), &[a])
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input"));
        }
        let mut out = vec![0.0; r * c];
        for (row_in, row_out) in src.chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(row_in, row_out);
        }
        Ok(self.push(r, c, out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let (r, c) = self.dims(a);
        let data = self
            .data(a)
            .iter()
            .map(|&x| match act {
                Activation::Gelu => gelu(x).0,
                Activation::Tanh => x.tanh(),
                Activation::Sigmoid => sigmoid(x),
                Activation::Exp => x.exp(),
                Activation::Abs => x.abs(),
                Activation::Square => x * x,
            })
            .collect();
        self.push(r, c, data, Op::Unary(a, act), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Square)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        self.push(1, 1, vec![s], Op::Mean(a), &[a])
    }

    /// Mean over rows, giving a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.data(a).chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / r.max(1) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(1, c, out, Op::MeanRows(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start > end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r}")));
        }
        let data = self.data(a)[start * c..end * c].to_vec();
        Ok(self.push(end - start, c, data, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start > end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let w = end - start;
        let src = self.data(a);
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        Ok(self.push(r, w, data, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or(Error::EmptyInput("concat_rows"))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{pc} columns vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(rows, c, data, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or(Error::EmptyInput("concat_cols"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..r {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(r, total, data, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Trailing moving average down each column with first-value padding.
    pub fn moving_average(&mut self, a: Var, window: usize) -> Result<Var> {
        if window == 0 {
            return Err(Error::Config("moving-average window must be positive".into()));
        }
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        let mut col = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                col[i] = src[i * c + j];
            }
            for (i, v) in crate::decomposition::trailing_mean(&col, window)
                .into_iter()
                .enumerate()
            {
                out[i * c + j] = v;
            }
        }
        Ok(self.push(r, c, out, Op::MovingAverage(a, window), &[a]))
    }

    /// Column-wise frequency filter: FFT, keep `modes` (optionally scaled by
    /// complex weights `w_re + i w_im`, each `modes x cols`), inverse FFT.
    pub fn spectral_filter(&mut self, x: Var, weights: Option<(Var, Var)>, modes: Rc<ModeSet>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r != modes.len() {
            return Err(Error::shape(
                "spectral_filter",
                format!("{r} rows for a {}-point mode set", modes.len()),
            ));
        }
        if let Some((wr, wi)) = weights {
            let want = (modes.count(), c);
            if self.dims(wr) != want || self.dims(wi) != want {
                return Err(Error::shape(
                    "spectral_filter",
                    format!("weights {:?}/{:?}, expected {want:?}", self.dims(wr), self.dims(wi)),
                ));
            }
        }
        let (y, kept) = {
            let w = weights.map(|(wr, wi)| FilterWeights {
                re: self.data(wr),
                im: self.data(wi),
            });
            filter_forward(self.data(x), c, &modes, w)
        };
        let parents: Vec<Var> = match weights {
            Some((wr, wi)) => vec![x, wr, wi],
            None => vec![x],
        };
        Ok(self.push(
            r,
            c,
            y,
            Op::Spectral {
                x,
                weights,
                modes,
                kept,
            },
            &parents,
        ))
    }

    /// Multi-head `softmax(scale * Q_h K_h^T) V_h`, heads being consecutive
    /// column blocks of equal width, concatenated back in order. `q` is
    /// `Lq x d`; `k` and `v` are `T x d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
        let ((lq, d), (t, dk), (tv, dv)) = (self.dims(q), self.dims(k), self.dims(v));
        if dk != d || dv != d || tv != t || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q {lq}x{d}, k {t}x{dk}, v {tv}x{dv}, {heads} heads"),
            ));
        }
        if [q, k, v].iter().any(|&x| self.data(x).iter().any(|z| z.is_nan())) {
            return Err(Error::NonFinite("attention input"));
        }
        let w = d / heads;
        let mut weights = vec![0.0; heads * lq * t];
        let mut out = vec![0.0; lq * d];
        for (h, a) in weights.chunks_mut((lq * t).max(1)).enumerate().take(heads) {
            let block = View::block(h * w, d);
            gemm_view(
                lq,
                w,
                t,
                scale,
                self.data(q),
                block,
                self.data(k),
                block.t(),
                0.0,
                a,
                View::row_major(t),
            );
            for row in a.chunks_mut(t.max(1)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                let inv = 1.0 / total;
                row.iter_mut().for_each(|x| *x *= inv);
            }
            gemm_view(
                lq,
                t,
                w,
                1.0,
                a,
                View::row_major(t),
                self.data(v),
                block,
                0.0,
                &mut out,
                block,
            );
        }
        Ok(self.push(
            lq,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against constant labels.
    pub fn bce(&mut self, p: Var, labels: Vec<f64>) -> Result<Var> {
        let n = self.data(p).len();
        if labels.len() != n {
            return Err(Error::shape("bce", format!("{} labels for {n} scores", labels.len())));
        }
        let loss = self
            .data(p)
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n.max(1) as f64;
        Ok(self.push(1, 1, vec![loss], Op::Bce(p, Rc::new(labels)), &[p]))
    }

    /// Runs the reverse sweep from a scalar `loss`, storing `d loss / d node`
    /// on every node that tracks gradients. Previous gradients are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.tracks(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(Some(g.unwrap_or_else(|| vec![0.0; n])));
            } else {
                node.value.set_grad(None);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let (rows, cols) = node.value.dims();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *row, |d| {
                    for chunk in g.chunks(cols.max(1)) {
                        axpy(d, chunk, 1.0);
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, |d| axpy(d, g, *k)),
            Op::AddScalar(a) => self.accumulate(grads, *a, |d| axpy(d, g, 1.0)),
            Op::MulConst(a, k) => self.accumulate(grads, *a, |d| {
                for ((d, g), k) in d.iter_mut().zip(g).zip(k.iter()) {
                    *d += g * k;
                }
            }),
            Op::MatMul(a, b) => {
                let ((m, k), n) = (self.dims(*a), cols);
                let (va, vb) = (self.data(*a), self.data(*b));
                // dA = G B^T, dB = A^T G
                self.accumulate(grads, *a, |d| gemm(m, n, k, g, false, vb, true, 1.0, d));
                self.accumulate(grads, *b, |d| gemm(k, m, n, va, true, g, false, 1.0, d));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, |d| {
                // out is rows x cols, input is cols x rows
                for r in 0..rows {
                    for c in 0..cols {
                        d[c * rows + r] += g[r * cols + c];
                    }
                }
            }),
            Op::SoftmaxRows(a) => self.accumulate(grads, *a, |d| {
                for ((y, g), d) in out.chunks(cols).zip(g.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in d.iter_mut().zip(y).zip(g) {
                        *d += y * (g - dot);
                    }
                }
            }),
            Op::Unary(a, act) => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |d| {
                    for (((d, g), &x), &y) in d.iter_mut().zip(g).zip(x).zip(out) {
                        let dydx = match act {
                            Activation::Gelu => gelu(x).1,
                            Activation::Tanh => 1.0 - y * y,
                            Activation::Sigmoid => y * (1.0 - y),
                            Activation::Exp => y,
                            Activation::Abs => {
                                if x > 0.0 {
                                    1.0
                                } else if x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Square => 2.0 * x,
                        };
                        *d += g * dydx;
                    }
                })
            }
            Op::Sum(a) => self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let k = g[0] / self.data(*a).len().max(1) as f64;
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += k));
            }
            Op::MeanRows(a) => {
                let r = self.dims(*a).0.max(1) as f64;
                self.accumulate(grads, *a, |d| {
                    for chunk in d.chunks_mut(cols.max(1)) {
                        for (d, g) in chunk.iter_mut().zip(g) {
                            *d += g / r;
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                self.accumulate(grads, *a, |d| axpy(&mut d[start * cols..(start + rows) * cols], g, 1.0))
            }
            Op::SliceCols(a, start) => {
                let c = self.dims(*a).1;
                self.accumulate(grads, *a, |d| {
                    for r in 0..rows {
                        axpy(
                            &mut d[r * c + start..r * c + start + cols],
                            &g[r * cols..(r + 1) * cols],
                            1.0,
                        );
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    self.accumulate(grads, p, |d| axpy(d, &g[offset..offset + len], 1.0));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    self.accumulate(grads, p, |d| {
                        for r in 0..rows {
                            axpy(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * cols + offset..r * cols + offset + w],
                                1.0,
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::MovingAverage(a, window) => self.accumulate(grads, *a, |d| {
                let inv = 1.0 / *window as f64;
                for t in 0..rows {
                    for lag in 0..*window {
                        let s = t.saturating_sub(lag);
                        for c in 0..cols {
                            d[s * cols + c] += g[t * cols + c] * inv;
                        }
                    }
                }
            }),
            Op::Spectral {
                x,
                weights,
                modes,
                kept,
            } => {
                let wv = weights.map(|(wr, wi)| FilterWeights {
                    re: self.data(wr),
                    im: self.data(wi),
                });
                let mut dx = self.tracks(*x).then(|| vec![0.0; rows * cols]);
                let mut dw = weights
                    .filter(|(wr, wi)| self.tracks(*wr) || self.tracks(*wi))
                    .map(|_| (vec![0.0; modes.count() * cols], vec![0.0; modes.count() * cols]));
                filter_backward(
                    g,
                    cols,
                    modes,
                    kept,
                    wv,
                    dx.as_deref_mut(),
                    dw.as_mut().map(|(a, b)| (a.as_mut_slice(), b.as_mut_slice())),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, |d| axpy(d, &dx, 1.0));
                }
                if let (Some((wr, wi)), Some((dre, dim))) = (weights, dw) {
                    self.accumulate(grads, *wr, |d| axpy(d, &dre, 1.0));
                    self.accumulate(grads, *wi, |d| axpy(d, &dim, 1.0));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                weights,
            } => {
                let (lq, d) = (rows, cols);
                let t = self.dims(*k).0;
                let w = d / heads;
                let (vq, vk, vv) = (self.data(*q), self.data(*k), self.data(*v));
                let (mut dq, mut dk, mut dv) = (
                    self.tracks(*q).then(|| vec![0.0; lq * d]),
                    self.tracks(*k).then(|| vec![0.0; t * d]),
                    self.tracks(*v).then(|| vec![0.0; t * d]),
                );
                let mut ds = vec![0.0; lq * t];
                let rm = View::row_major(t);
                for h in 0..*heads {
                    let a = &weights[h * lq * t..(h + 1) * lq * t];
                    let block = View::block(h * w, d);
                    if let Some(dv) = dv.as_mut() {
                        gemm_view(t, lq, w, 1.0, a, rm.t(), g, block, 1.0, dv, block);
                    }
                    if dq.is_none() && dk.is_none() {
                        continue;
                    }
                    // dA = G_h V_h^T, then the softmax Jacobian row by row
                    gemm_view(lq, w, t, 1.0, g, block, vv, block.t(), 0.0, &mut ds, rm);
                    for (drow, arow) in ds.chunks_mut(t.max(1)).zip(a.chunks(t.max(1))) {
                        let dot: f64 = drow.iter().zip(arow).map(|(x, y)| x * y).sum();
                        for (x, y) in drow.iter_mut().zip(arow) {
                            *x = y * (*x - dot);
                        }
                    }
                    if let Some(dq) = dq.as_mut() {
                        gemm_view(lq, t, w, *scale, &ds, rm, vk, block, 1.0, dq, block);
                    }
                    if let Some(dk) = dk.as_mut() {
                        gemm_view(t, lq, w, *scale, &ds, rm.t(), vq, block, 1.0, dk, block);
                    }
                }
                for (x, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = d {
                        self.accumulate(grads, x, |acc| axpy(acc, &d, 1.0));
                    }
                }
            }
            Op::Bce(p, labels) => {
                let n = labels.len().max(1) as f64;
                let pv = self.data(*p);
                self.accumulate(grads, *p, |d| {
                    for ((d, &p), &y) in d.iter_mut().zip(pv).zip(labels.iter()) {
                        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        *d += g[0] * (-(y / p) + (1.0 - y) / (1.0 - p)) / n;
                    }
                })
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.tracks(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax of a vector.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(vec![1.0, -2.0, 3.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(3.0));
        let y = g.square(w);
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(vec![1.0, 2.0]));
        let w = g.param(Tensor::row(vec![0.5, 0.5]));
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1.0, 2.0]).unwrap();
        // 1 / (1 + e), e / (1 + e)
        let e = std::f64::consts::E;
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] - 0.26894).abs() < 1e-5);
        assert!((p[1] - 0.73106).abs() < 1e-5);
        let shifted = softmax(&[101.0, 102.0]).unwrap();
        assert!((shifted[0] - p[0]).abs() < 1e-15);
        assert!(softmax(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
        assert!(g.slice_rows(a, 1, 3).is_err());
    }
}
