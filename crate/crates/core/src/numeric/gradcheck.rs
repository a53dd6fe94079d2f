//! Central finite-difference checks of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest relative error per input tensor.
    pub max_rel_per_input: Vec<f64>,
    pub worst: Option<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_per_input.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `d f / d inputs` from [`Graph::backward`] with central
/// differences of step `eps`. `build` records a scalar loss given the input
/// handles; it must be deterministic. `stride` > 1 checks every `stride`-th
/// entry of each input (the first and last are always included).
pub fn check_gradients<F>(build: F, inputs: &[Tensor], eps: f64, stride: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_per_input: vec![0.0; inputs.len()],
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let mut idx: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
        if n > 0 && idx.last() != Some(&(n - 1)) {
            idx.push(n - 1);
        }
        for j in idx {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].get(j).copied().unwrap_or(0.0);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite("gradient check"));
            }
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_per_input[i] {
                report.max_rel_per_input[i] = rel;
            }
            if report.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                report.worst = Some(GradCheckEntry {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Activation, ModeSet, RngState};
    use std::rc::Rc;

    fn random(rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
        Tensor::matrix(rows, cols, rng.normals(rows * cols))
    }

    fn assert_ok(r: GradCheckReport) {
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.worst);
    }

    #[test]
    fn elementwise_and_reductions() {
        let mut rng = RngState::new(11);
        let inputs = vec![random(3, 4, &mut rng), random(3, 4, &mut rng), random(1, 4, &mut rng)];
        for act in [
            Activation::Gelu,
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Exp,
            Activation::Abs,
            Activation::Square,
        ] {
            let r = check_gradients(
                |g, v| {
                    let a = g.mul(v[0], v[1])?;
                    let a = g.add_row(a, v[2])?;
                    let a = g.activation(a, act);
                    let b = g.sub(a, v[1])?;
                    let b = g.scale(b, 0.7);
                    let b = g.add_scalar(b, 0.3);
                    let m = g.mean_rows(b);
                    let m = g.square(m);
                    Ok(g.sum(m))
                },
                &inputs,
                1e-5,
                1,
            )
            .unwrap();
            assert_ok(r);
        }
    }

    #[test]
    fn matrix_ops() {
        let mut rng = RngState::new(12);
        let inputs = vec![random(3, 5, &mut rng), random(5, 2, &mut rng)];
        let r = check_gradients(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                let s = g.softmax_rows(p)?;
                let t = g.transpose(s);
                let c = g.concat_cols(&[s, p])?;
                let r = g.slice_cols(c, 1, 3)?;
                let r = g.slice_rows(r, 1, 3)?;
                let rr = g.concat_rows(&[r, r])?;
                let x = g.mul_const(rr, vec![0.5, 2.0, -1.0, 3.0, 1.0, 1.0, 0.0, 2.0])?;
                let x = g.mean(x);
                let y = g.sum(t);
                let z = g.moving_average(p, 2)?;
                let z = g.mean(z);
                let out = g.add(x, y)?;
                g.add(out, z)
            },
            &inputs,
            1e-5,
            1,
        )
        .unwrap();
        assert_ok(r);
    }

    #[test]
    fn spectral_and_attention() {
        let mut rng = RngState::new(13);
        let t = 16;
        let modes = Rc::new(ModeSet::lowest(t, 5).unwrap());
        let inputs = vec![
            random(t, 4, &mut rng),
            random(5, 4, &mut rng),
            random(5, 4, &mut rng),
            random(t + 3, 4, &mut rng),
        ];
        let r = check_gradients(
            |g, v| {
                let y = g.spectral_filter(v[0], Some((v[1], v[2])), modes.clone())?;
                let z = g.spectral_filter(y, None, modes.clone())?;
                let a = g.attention(v[3], y, z, 2, 0.5)?;
                let a = g.gelu(a);
                let s = g.square(a);
                Ok(g.mean(s))
            },
            &inputs,
            1e-5,
            1,
        )
        .unwrap();
        assert_ok(r);
    }

    #[test]
    fn bce_gradient() {
        let inputs = vec![Tensor::column(vec![0.2, 0.7, 0.9])];
        let r = check_gradients(|g, v| g.bce(v[0], vec![1.0, 0.0, 1.0]), &inputs, 1e-6, 1).unwrap();
        assert_ok(r);
    }
}
