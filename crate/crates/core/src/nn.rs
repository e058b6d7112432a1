//! Minimal feed-forward building blocks shared by the trainable models:
//! a dense stack with rectifier hidden layers and a linear output layer,
//! momentum SGD, and softmax cross-entropy.
//!
//! Everything is f64 so analytic gradients can be checked against central
//! finite differences at tight tolerances.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, read_mat0, write_mat0, Matrix};

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// ln(sigmoid(x)) computed without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(1.0 + (-x).exp()).ln()
    } else {
        x - (1.0 + x.exp()).ln()
    }
}

/// Dense layers `widths[0] -> widths[1] -> ... -> widths[n]` with a
/// rectifier after every layer except the last, which stays linear.
#[derive(Debug, Clone)]
pub struct DenseStack {
    widths: Vec<usize>,
    weights: Vec<Matrix>, // weights[i]: widths[i+1] x widths[i]
    biases: Vec<Vec<f64>>,
}

/// Per-layer activations cached by [`DenseStack::forward_cached`].
pub struct StackCache {
    /// inputs[i] is the input to layer i; inputs[n] is the final output.
    pub inputs: Vec<Vec<f64>>,
    /// pre-activation of each layer.
    pub zs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct StackGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl DenseStack {
    /// Seeded uniform init: +-sqrt(6/fan_in) on the rectified layers so
    /// activations keep their magnitude through deep towers, and a quarter
    /// of that on the linear output layer so initial outputs start small.
    pub fn new(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "stack needs at least one layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let mut s = (6.0 / fan_in as f64).sqrt();
            if i == widths.len() - 2 {
                s *= 0.25;
            }
            weights.push(Matrix::from_fn(fan_out, fan_in, |_, _| {
                rng.random_range(-s..s)
            }));
            biases.push(vec![0.0; fan_out]);
        }
        DenseStack {
            widths: widths.to_vec(),
            weights,
            biases,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn set_bias(&mut self, layer: usize, bias: Vec<f64>) {
        assert_eq!(bias.len(), self.biases[layer].len());
        self.biases[layer] = bias;
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut Matrix, &mut Vec<f64>) {
        (&mut self.weights[layer], &mut self.biases[layer])
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.matvec(&a);
            axpy(&mut z, 1.0, b);
            if i < last {
                for v in z.iter_mut() {
                    *v = relu(*v);
                }
            }
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, x: &[f64]) -> StackCache {
        let mut inputs = vec![x.to_vec()];
        let mut zs = Vec::new();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.matvec(inputs.last().unwrap());
            axpy(&mut z, 1.0, b);
            zs.push(z.clone());
            if i < last {
                for v in z.iter_mut() {
                    *v = relu(*v);
                }
            }
            inputs.push(z);
        }
        StackCache { inputs, zs }
    }

    /// Backpropagates `d_out` (gradient at the linear output) through the
    /// stack, accumulating parameter gradients into `grads` and returning
    /// the gradient with respect to the input.
    pub fn backward(&self, cache: &StackCache, d_out: &[f64], grads: &mut StackGrads) -> Vec<f64> {
        let n = self.weights.len();
        let mut g = d_out.to_vec();
        for i in (0..n).rev() {
            if i < n - 1 {
                // through the rectifier of layer i
                for (gv, z) in g.iter_mut().zip(&cache.zs[i]) {
                    if *z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let input = &cache.inputs[i];
            let gw = grads.weights[i].data_mut();
            let cols = input.len();
            for (r, gr) in g.iter().enumerate() {
                if *gr != 0.0 {
                    axpy(&mut gw[r * cols..(r + 1) * cols], *gr, input);
                }
            }
            axpy(&mut grads.biases[i], 1.0, &g);
            g = self.weights[i].matvec_t(&g);
        }
        g
    }

    pub fn zero_grads(&self) -> StackGrads {
        StackGrads {
            weights: self
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.data().len())
            .sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn params_flat(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
    }

    pub fn set_params_flat(&mut self, params: &mut impl Iterator<Item = f64>) {
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for v in w.data_mut() {
                *v = params.next().expect("param vector too short");
            }
            for v in b.iter_mut() {
                *v = params.next().expect("param vector too short");
            }
        }
    }

    pub fn grads_flat(grads: &StackGrads, out: &mut Vec<f64>) {
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// Rebuilds a stack from per-layer weight matrices and bias vectors,
    /// validating that the shapes chain.
    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Dimension("stack needs matched weights and biases".into()));
        }
        let mut widths = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.cols() != *widths.last().unwrap() {
                return Err(Error::Dimension(format!(
                    "layer input {} does not chain with previous output {}",
                    w.cols(),
                    widths.last().unwrap()
                )));
            }
            if w.rows() != b.len() {
                return Err(Error::Dimension("bias length mismatch".into()));
            }
            widths.push(w.rows());
        }
        Ok(DenseStack {
            widths,
            weights,
            biases,
        })
    }

    /// Writes layer i as `{prefix}{i}_w.mat` / `{prefix}{i}_b.mat`.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            write_mat0(&dir.join(format!("{prefix}{i}_w.mat")), w)?;
            let bm = Matrix::from_vec(1, b.len(), b.clone());
            write_mat0(&dir.join(format!("{prefix}{i}_b.mat")), &bm)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, prefix: &str, n_layers: usize) -> Result<Self> {
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            weights.push(read_mat0(&dir.join(format!("{prefix}{i}_w.mat")))?);
            let bm = read_mat0(&dir.join(format!("{prefix}{i}_b.mat")))?;
            biases.push(bm.data().to_vec());
        }
        DenseStack::from_parts(weights, biases)
    }
}

/// Classic momentum buffers for one dense stack.
pub struct StackMomentum {
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl StackMomentum {
    pub fn new(stack: &DenseStack) -> Self {
        let g = stack.zero_grads();
        StackMomentum {
            weights: g.weights,
            biases: g.biases,
        }
    }

    /// v = momentum * v - step * g; p += v
    pub fn apply(&mut self, stack: &mut DenseStack, grads: &StackGrads, step: f64, momentum: f64) {
        for i in 0..stack.weights.len() {
            momentum_update(
                stack.weights[i].data_mut(),
                grads.weights[i].data(),
                self.weights[i].data_mut(),
                step,
                momentum,
            );
            momentum_update(
                &mut stack.biases[i],
                &grads.biases[i],
                &mut self.biases[i],
                step,
                momentum,
            );
        }
    }
}

pub fn momentum_update(param: &mut [f64], grad: &[f64], vel: &mut [f64], step: f64, momentum: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = momentum * *v - step * *g;
        *p += *v;
    }
}

/// Softmax of `logits` (numerically stabilized).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy loss and gradient w.r.t. the logits for one example.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let probs = softmax(logits);
    let loss = -probs[label].max(1e-300).ln();
    let mut d = probs;
    d[label] -= 1.0;
    (loss, d)
}

/// Central finite-difference tolerance helper: relative error between an
/// analytic and a numeric derivative, lenient when both are tiny.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}
