use ndarray::{Array2, Axis};
use rand::Rng;

use crate::autodiff::tape::tanh;
use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// One masked autoregressive affine transform with a reward conditioner.
///
/// Input `i` (0-based) carries degree `i + 1`. Hidden unit `k` of every
/// hidden layer carries degree `k mod dim`, so degree-0 units see only the
/// conditioner. Output slot `i` connects to hidden units of degree `<= i`,
/// which makes `(shift_i, log_scale_i)` a function of inputs `0..i` and the
/// condition only.
#[derive(Clone, Debug, PartialEq)]
pub struct MadeLayer {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub input_degrees: Vec<usize>,
    pub hidden_degrees: Vec<Vec<usize>>,
    pub hidden_weights: Vec<Matrix>,
    pub hidden_biases: Vec<Matrix>,
    pub hidden_cond: Vec<Matrix>,
    pub hidden_masks: Vec<Matrix>,
    pub shift_weights: Matrix,
    pub log_scale_weights: Matrix,
    pub shift_cond: Matrix,
    pub log_scale_cond: Matrix,
    pub shift_bias: Matrix,
    pub log_scale_bias: Matrix,
    pub output_mask: Matrix,
}

#[derive(Clone, Debug)]
pub struct MadeOutput {
    pub shift: Matrix,
    pub log_scale: Matrix,
}

pub(crate) fn degrees(dim: usize, hidden: &[usize]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let input = (1..=dim).collect();
    let hid = hidden
        .iter()
        .map(|&h| (0..h).map(|k| k % dim).collect())
        .collect();
    (input, hid)
}

pub(crate) fn masks(input: &[usize], hidden: &[Vec<usize>]) -> (Vec<Matrix>, Matrix) {
    let mut out = Vec::with_capacity(hidden.len());
    let mut prev = input;
    for layer in hidden {
        out.push(Array2::from_shape_fn(
            (prev.len(), layer.len()),
            |(i, k)| f64::from(u8::from(layer[k] >= prev[i])),
        ));
        prev = layer;
    }
    let dim = input.len();
    let output = Array2::from_shape_fn((prev.len(), dim), |(k, o)| {
        f64::from(u8::from(o + 1 > prev[k]))
    });
    (out, output)
}

fn squash(raw: f64, bound: f64) -> f64 {
    bound * tanh(raw / bound)
}

impl MadeLayer {
    /// Random hidden weights, zero output weights (identity transform).
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be at least 1"));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("hidden layers must be non-empty"));
        }
        let (input_degrees, hidden_degrees) = degrees(dim, hidden);
        let (hidden_masks, output_mask) = masks(&input_degrees, &hidden_degrees);
        let mut hidden_weights = Vec::new();
        let mut hidden_biases = Vec::new();
        let mut hidden_cond = Vec::new();
        let mut fan_in = dim;
        for &h in hidden {
            let a = 1.0 / ((fan_in + 1) as f64).sqrt();
            hidden_weights.push(Array2::from_shape_fn((fan_in, h), |_| {
                rng.random_range(-a..a)
            }));
            hidden_cond.push(Array2::from_shape_fn((1, h), |_| rng.random_range(-a..a)));
            hidden_biases.push(Array2::zeros((1, h)));
            fan_in = h;
        }
        let last = *hidden.last().expect("non-empty");
        Ok(Self {
            dim,
            hidden: hidden.to_vec(),
            input_degrees,
            hidden_degrees,
            hidden_weights,
            hidden_biases,
            hidden_cond,
            hidden_masks,
            shift_weights: Array2::zeros((last, dim)),
            log_scale_weights: Array2::zeros((last, dim)),
            shift_cond: Array2::zeros((1, dim)),
            log_scale_cond: Array2::zeros((1, dim)),
            shift_bias: Array2::zeros((1, dim)),
            log_scale_bias: Array2::zeros((1, dim)),
            output_mask,
        })
    }

    /// Trainable arrays in a fixed order shared by `parameters_mut` and
    /// [`build`](Self::build).
    pub fn parameters(&self) -> Vec<&Matrix> {
        let mut v = Vec::with_capacity(3 * self.hidden.len() + 6);
        for k in 0..self.hidden.len() {
            v.push(&self.hidden_weights[k]);
            v.push(&self.hidden_biases[k]);
            v.push(&self.hidden_cond[k]);
        }
        v.extend([
            &self.shift_weights,
            &self.log_scale_weights,
            &self.shift_cond,
            &self.log_scale_cond,
            &self.shift_bias,
            &self.log_scale_bias,
        ]);
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = Vec::with_capacity(3 * self.hidden.len() + 6);
        for ((w, b), c) in self
            .hidden_weights
            .iter_mut()
            .zip(self.hidden_biases.iter_mut())
            .zip(self.hidden_cond.iter_mut())
        {
            v.push(w);
            v.push(b);
            v.push(c);
        }
        v.extend([
            &mut self.shift_weights,
            &mut self.log_scale_weights,
            &mut self.shift_cond,
            &mut self.log_scale_cond,
            &mut self.shift_bias,
            &mut self.log_scale_bias,
        ]);
        v
    }

    pub fn num_parameter_arrays(&self) -> usize {
        3 * self.hidden.len() + 6
    }

    /// Shift and bounded log-scale for inputs `x` (`n x dim`) and the
    /// standardized condition column `c` (`n x 1`).
    pub fn conditioner(&self, x: &Matrix, c: &Matrix, bound: f64) -> MadeOutput {
        let mut h = x.clone();
        for k in 0..self.hidden.len() {
            let w = &self.hidden_weights[k] * &self.hidden_masks[k];
            let mut a = h.dot(&w) + c.dot(&self.hidden_cond[k]);
            a += &self.hidden_biases[k];
            a.mapv_inplace(tanh);
            h = a;
        }
        let shift = h.dot(&(&self.shift_weights * &self.output_mask))
            + c.dot(&self.shift_cond)
            + &self.shift_bias;
        let mut log_scale = h.dot(&(&self.log_scale_weights * &self.output_mask))
            + c.dot(&self.log_scale_cond)
            + &self.log_scale_bias;
        log_scale.mapv_inplace(|v| squash(v, bound));
        MadeOutput { shift, log_scale }
    }

    /// Density direction: `y = (x - shift) ⊙ exp(-log_scale)` and the per-row
    /// `log |det ∂y/∂x| = -Σ log_scale`.
    pub fn forward(&self, x: &Matrix, c: &Matrix, bound: f64) -> (Matrix, Vec<f64>) {
        let MadeOutput { shift, log_scale } = self.conditioner(x, c, bound);
        let y = (x - &shift) * &log_scale.mapv(|a| (-a).exp());
        let logdet = log_scale.sum_axis(Axis(1)).iter().map(|s| -s).collect();
        (y, logdet)
    }

    /// Sampling direction, solved one coordinate at a time.
    pub fn inverse(&self, y: &Matrix, c: &Matrix, bound: f64) -> Matrix {
        let mut x = Array2::zeros(y.raw_dim());
        for i in 0..self.dim {
            let MadeOutput { shift, log_scale } = self.conditioner(&x, c, bound);
            for r in 0..y.nrows() {
                x[[r, i]] = y[[r, i]] * log_scale[[r, i]].exp() + shift[[r, i]];
            }
        }
        x
    }

    /// Record the density-direction transform on `tape`. `params` are this
    /// layer's slots in [`parameters`](Self::parameters) order.
    pub fn build(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        c: Var,
        bound: f64,
    ) -> Result<(Var, Var)> {
        let nh = self.hidden.len();
        let mut h = x;
        for k in 0..nh {
            let (w, b, cw) = (params[3 * k], params[3 * k + 1], params[3 * k + 2]);
            let lin = tape.masked_matmul(h, w, Some(self.hidden_masks[k].clone()))?;
            let cond = tape.matmul(c, cw)?;
            let a = tape.add(lin, cond)?;
            let a = tape.add(a, b)?;
            h = tape.tanh(a);
        }
        let o = &params[3 * nh..];
        let affine = |tape: &mut Tape, w: Var, cw: Var, b: Var| -> Result<Var> {
            let lin = tape.masked_matmul(h, w, Some(self.output_mask.clone()))?;
            let cond = tape.matmul(c, cw)?;
            let s = tape.add(lin, cond)?;
            tape.add(s, b)
        };
        let shift = affine(tape, o[0], o[2], o[4])?;
        let raw = affine(tape, o[1], o[3], o[5])?;
        let scaled = tape.scale(raw, 1.0 / bound)?;
        let squashed = tape.tanh(scaled);
        let log_scale = tape.scale(squashed, bound)?;
        let centered = tape.sub(x, shift)?;
        let neg = tape.scale(log_scale, -1.0)?;
        let inv_scale = tape.exp(neg);
        let y = tape.mul(centered, inv_scale)?;
        let logdet = tape.sum(neg, crate::autodiff::SumAxis::Rows);
        Ok((y, logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_for_dim_one_route_only_the_condition() {
        let (inp, hid) = degrees(1, &[4, 4]);
        let (hm, om) = masks(&inp, &hid);
        assert!(hm[0].iter().all(|&m| m == 0.0));
        assert!(om.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn mask_connectivity_is_strictly_lower_triangular() {
        let d = 4;
        let (inp, hid) = degrees(d, &[7, 9]);
        let (hm, om) = masks(&inp, &hid);
        // boolean reachability input -> output
        let reach = hm[0].dot(&hm[1]).dot(&om);
        for i in 0..d {
            for o in 0..d {
                if i >= o {
                    assert_eq!(reach[[i, o]], 0.0, "input {i} reaches output {o}");
                }
            }
        }
        // every input except the last reaches some output
        for i in 0..d - 1 {
            assert!(reach.row(i).iter().any(|&v| v > 0.0));
        }
    }
}
