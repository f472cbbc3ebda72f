//! Dense feed-forward networks with hand-written backpropagation and an
//! Adam optimizer.
//!
//! All parameters of a network live in one flat buffer (per layer: weights
//! row-major `out x in`, then biases), which keeps the optimizer and the
//! finite-difference checker shape-agnostic.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: parameters {params}, gradients {grads}, state {state}")]
    ShapeMismatch {
        params: usize,
        grads: usize,
        state: usize,
    },
    #[error("network needs at least an input and an output dimension")]
    EmptyNetwork,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    // subgradient of ReLU at 0 is 0
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `inputs[l]` is the input of layer `l`; the last entry is the output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("tape holds at least the input")
    }

    /// Pre-activation values of every layer.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as [`Mlp::params`].
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl Mlp {
    /// Zero-initialised network.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::EmptyNetwork);
        }
        if activations.len() != dims.len() - 1 {
            return Err(NnError::DimensionMismatch {
                expected: dims.len() - 1,
                got: activations.len(),
            });
        }
        let n: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// ReLU on hidden layers, identity on the output layer, He-normal weights
    /// and zero biases.
    pub fn new_relu<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let n_layers = dims.len().saturating_sub(1);
        let acts: Vec<Activation> = (0..n_layers)
            .map(|l| {
                if l + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                }
            })
            .collect();
        let mut net = Mlp::zeros(dims, &acts)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = normal.sample(rng);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_params(
        dims: &[usize],
        activations: &[Activation],
        params: Vec<f64>,
    ) -> Result<Self, NnError> {
        let mut net = Mlp::zeros(dims, activations)?;
        if params.len() != net.params.len() {
            return Err(NnError::DimensionMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// (weights offset, bias offset) of layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.dims[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (off, off + self.dims[l] * self.dims[l + 1])
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let (w, b) = self.layer_offsets(l);
        &self.params[w..b]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let (_, b) = self.layer_offsets(l);
        &self.params[b..b + self.dims[l + 1]]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let (w, b) = self.layer_offsets(l);
        &mut self.params[w..b]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let (_, b) = self.layer_offsets(l);
        let n = self.dims[l + 1];
        &mut self.params[b..b + n]
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let n_layers = self.activations.len();
        let mut inputs = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers);
        inputs.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let input = &inputs[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>()
                })
                .collect();
            let act = self.activations[l];
            inputs.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
            offset += n_in * n_out + n_out;
        }
        let out = inputs.last().expect("at least one layer").clone();
        Ok((out, Tape { inputs, pre }))
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Gradients of `output . grad_output` with respect to parameters and input.
    pub fn backward(&self, tape: &Tape, grad_output: &[f64]) -> Result<Gradients, NnError> {
        let mut grads = vec![0.0; self.params.len()];
        let input = self.backward_into(tape, grad_output, &mut grads)?;
        Ok(Gradients {
            params: grads,
            input,
        })
    }

    /// Like [`Mlp::backward`] but accumulates parameter gradients into `acc`
    /// and returns the input gradient.
    pub fn backward_into(
        &self,
        tape: &Tape,
        grad_output: &[f64],
        acc: &mut [f64],
    ) -> Result<Vec<f64>, NnError> {
        if grad_output.len() != self.output_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.output_dim(),
                got: grad_output.len(),
            });
        }
        if acc.len() != self.params.len() {
            return Err(NnError::ShapeMismatch {
                params: self.params.len(),
                grads: acc.len(),
                state: acc.len(),
            });
        }
        if tape.pre.len() != self.activations.len() || tape.inputs[0].len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.activations.len(),
                got: tape.pre.len(),
            });
        }
        let mut delta: Vec<f64> = grad_output.to_vec();
        for l in (0..self.activations.len()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let act = self.activations[l];
            for (d, &z) in delta.iter_mut().zip(&tape.pre[l]) {
                *d *= act.derivative(z);
            }
            let input = &tape.inputs[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                acc[b_off + o] += d;
                let row = &mut acc[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (g, &v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
            }
            let w = &self.params[w_off..b_off];
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (n, &a) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *n += d * a;
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

/// Bias-corrected adaptive moment estimation over a flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NnError::ShapeMismatch {
                params: params.len(),
                grads: grads.len(),
                state: self.m.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Mini-batch training settings shared by all trainable encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return Err("batch_size must be >= 2".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err("lr must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Relative error between an analytic and a numeric derivative. Values below
/// `floor` in magnitude are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Magnitude below which [`grad_check`] compares derivatives absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares `loss_and_grad`'s analytic gradient with central finite
/// differences (step `h`) at `params`; returns the maximum relative error.
pub fn grad_check<F>(params: &[f64], h: f64, mut loss_and_grad: F) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_and_grad(params);
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let (plus, _) = loss_and_grad(&probe);
        probe[i] = orig - h;
        let (minus, _) = loss_and_grad(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric, GRAD_CHECK_FLOOR));
    }
    worst
}
