//! Small dense MLPs over row-batched inputs, with a hand-written reverse sweep.
//!
//! Parameters live in a caller-owned flat slice. Layer `l` stores its weight
//! `W_l` (`out x in`, row-major) followed by its bias `b_l`, and computes
//! `y = x W_lᵀ + b_l`. A GELU (tanh approximation) follows every layer
//! except the last.

use crate::linalg::DenseMatrix;
use crate::rng::Rng64;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    widths: Vec<usize>,
}

/// Intermediate values kept for the reverse sweep.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each layer.
    inputs: Vec<DenseMatrix>,
    /// Pre-activation output of each hidden layer.
    preacts: Vec<DenseMatrix>,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`; at least one layer.
    pub fn new(widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        Self { widths }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn layer_offsets(&self) -> Vec<(usize, usize, usize)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let start = off;
                off += w[1] * w[0] + w[1];
                (start, w[0], w[1])
            })
            .collect()
    }

    /// Uniform `±1/√fan_in` for weights and biases.
    pub fn init(&self, rng: &mut Rng64, out: &mut [f64]) {
        assert_eq!(out.len(), self.num_params());
        for (start, fan_in, fan_out) in self.layer_offsets() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut out[start..start + fan_in * fan_out + fan_out] {
                *v = rng.uniform(-bound, bound);
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &DenseMatrix) -> DenseMatrix {
        self.forward_traced(params, x).0
    }

    pub fn forward_traced(&self, params: &[f64], x: &DenseMatrix) -> (DenseMatrix, MlpTrace) {
        assert_eq!(params.len(), self.num_params());
        assert_eq!(x.cols(), self.input_dim());
        let layers = self.layer_offsets();
        let mut inputs = Vec::with_capacity(layers.len());
        let mut preacts = Vec::with_capacity(layers.len() - 1);
        let mut cur = x.clone();
        for (l, &(start, fan_in, fan_out)) in layers.iter().enumerate() {
            let y = linear(&params[start..start + fan_in * fan_out + fan_out], fan_in, fan_out, &cur);
            inputs.push(cur);
            if l + 1 < layers.len() {
                let mut act = y.clone();
                act.values_mut().iter_mut().for_each(|v| *v = gelu(*v));
                preacts.push(y);
                cur = act;
            } else {
                cur = y;
            }
        }
        (cur, MlpTrace { inputs, preacts })
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, params: &[f64], trace: &MlpTrace, y_bar: &DenseMatrix, grad: &mut [f64]) -> DenseMatrix {
        assert_eq!(grad.len(), self.num_params());
        let layers = self.layer_offsets();
        let mut g = y_bar.clone();
        for (l, &(start, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            if l + 1 < layers.len() {
                for (v, z) in g.values_mut().iter_mut().zip(trace.preacts[l].values()) {
                    *v *= gelu_grad(*z);
                }
            }
            let p = &params[start..start + fan_in * fan_out + fan_out];
            g = linear_backward(p, fan_in, fan_out, &trace.inputs[l], &g, &mut grad[start..start + fan_in * fan_out + fan_out]);
        }
        g
    }
}

/// `x Wᵀ + b` for a packed `[W (out x in), b (out)]` slice.
pub fn linear(p: &[f64], fan_in: usize, fan_out: usize, x: &DenseMatrix) -> DenseMatrix {
    let w = &p[..fan_in * fan_out];
    let b = &p[fan_in * fan_out..];
    let mut out = DenseMatrix::zeros(x.rows(), fan_out);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let yr = out.row_mut(r);
        for o in 0..fan_out {
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            yr[o] = b[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

/// Reverse sweep of [`linear`]; accumulates into `grad` and returns `x̄`.
pub fn linear_backward(
    p: &[f64],
    fan_in: usize,
    fan_out: usize,
    x: &DenseMatrix,
    y_bar: &DenseMatrix,
    grad: &mut [f64],
) -> DenseMatrix {
    let w = &p[..fan_in * fan_out];
    let (gw, gb) = grad.split_at_mut(fan_in * fan_out);
    let mut x_bar = DenseMatrix::zeros(x.rows(), fan_in);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let yb = y_bar.row(r);
        let xb = x_bar.row_mut(r);
        for o in 0..fan_out {
            let g = yb[o];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let wr = &w[o * fan_in..(o + 1) * fan_in];
            let gwr = &mut gw[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                gwr[i] += g * xr[i];
                xb[i] += g * wr[i];
            }
        }
    }
    x_bar
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.8411919906082768).abs() < 1e-15);
        assert!((gelu(-3.0) + 0.0036373920817729).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn two_layer_matches_straight_line() {
        let mlp = Mlp::new(vec![2, 3, 1]);
        let mut p = vec![0.0; mlp.num_params()];
        mlp.init(&mut Rng64::new(5), &mut p);
        let x = DenseMatrix::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5]]);
        let y = mlp.forward(&p, &x);
        for r in 0..2 {
            let mut hidden = [0.0; 3];
            for (o, h) in hidden.iter_mut().enumerate() {
                *h = gelu(p[6 + o] + p[o * 2] * x.get(r, 0) + p[o * 2 + 1] * x.get(r, 1));
            }
            let out = p[12] + (0..3).map(|i| p[9 + i] * hidden[i]).sum::<f64>();
            assert!((y.get(r, 0) - out).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mlp = Mlp::new(vec![3, 4, 4, 2]);
        let mut p = vec![0.0; mlp.num_params()];
        mlp.init(&mut Rng64::new(11), &mut p);
        let x = DenseMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64 * 0.7).sin());
        let w = DenseMatrix::from_fn(3, 2, |i, j| 0.3 + i as f64 * 0.2 - j as f64);
        let f = |p: &[f64], x: &DenseMatrix| -> f64 {
            let y = mlp.forward(p, x);
            y.values().iter().zip(w.values()).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = mlp.forward_traced(&p, &x);
        let mut g = vec![0.0; p.len()];
        let xb = mlp.backward(&p, &trace, &w, &mut g);
        let h = 1e-6;
        for k in 0..p.len() {
            let mut pp = p.clone();
            pp[k] += h;
            let mut pm = p.clone();
            pm[k] -= h;
            let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "param {k}: {fd} vs {}", g[k]);
        }
        for k in 0..9 {
            let mut xp = x.clone();
            xp.values_mut()[k] += h;
            let mut xm = x.clone();
            xm.values_mut()[k] -= h;
            let fd = (f(&p, &xp) - f(&p, &xm)) / (2.0 * h);
            assert!((fd - xb.values()[k]).abs() < 1e-8);
        }
    }
}
