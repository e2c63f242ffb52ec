//! Fully connected network with logistic hidden units and a linear output,
//! trained on mean squared error with mini-batch Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Regressor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
}

impl MlpSpec {
    pub fn electric() -> MlpSpec {
        MlpSpec {
            hidden: vec![100, 80],
            learning_rate: 0.001,
        }
    }

    pub fn diesel() -> MlpSpec {
        MlpSpec {
            hidden: vec![400, 200, 100, 50, 25],
            learning_rate: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 200,
            batch_size: 64,
        }
    }
}

/// Adam moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Network weights stored flat: per layer, the `out × in` weight matrix
/// (row-major) followed by `out` biases. Outputs are mapped back to target
/// units with `target_mean + target_scale * y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layer_sizes: Vec<usize>,
    pub params: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
}

impl Mlp {
    /// Zero-initialised network with the given layer widths (input first,
    /// output last).
    pub fn zeros(layer_sizes: Vec<usize>) -> Mlp {
        let n = layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Mlp {
            layer_sizes,
            params: vec![0.0; n],
            target_mean: 0.0,
            target_scale: 1.0,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, spec: &MlpSpec, rng: &mut impl Rng) -> Mlp {
        let mut sizes = vec![input_dim];
        sizes.extend(&spec.hidden);
        sizes.push(1);
        let mut net = Mlp::zeros(sizes);
        let mut off = 0;
        for w in net.layer_sizes.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = rng.random_range(-limit..limit);
            }
            off += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.n_layers());
        let mut off = 0;
        for w in self.layer_sizes.windows(2) {
            offs.push(off);
            off += w[0] * w[1] + w[1];
        }
        offs
    }

    /// Activations of every layer for one input; the last entry is the raw
    /// (scaled) network output.
    fn activations(&self, params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.n_layers() - 1;
        for (l, off) in self.offsets().into_iter().enumerate() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let input = &acts[l];
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            let out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let z = b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        sigmoid(z)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    /// Network output before target de-scaling.
    pub fn forward_scaled(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.layer_sizes[0] {
            return Err(Error::DimensionMismatch {
                expected: self.layer_sizes[0],
                got: x.len(),
            });
        }
        Ok(self.activations(&self.params, x).last().map_or(0.0, |o| o[0]))
    }

    /// Mean squared error of the scaled output over a batch.
    pub fn loss(&self, xs: &[&[f64]], ys: &[f64]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| {
                let o = self.activations(&self.params, x).last().map_or(0.0, |o| o[0]);
                (o - y).powi(2)
            })
            .sum::<f64>()
            / ys.len() as f64
    }

    /// Batch MSE and its gradient with respect to `params`.
    pub fn loss_and_gradient(&self, xs: &[&[f64]], ys: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let offs = self.offsets();
        let n = ys.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.activations(&self.params, x);
            let out = acts[self.n_layers()][0];
            loss += (out - y).powi(2) / n;
            // delta = dL/dz for the current layer
            let mut delta = vec![2.0 * (out - y) / n];
            for l in (0..self.n_layers()).rev() {
                let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
                let off = offs[l];
                let input = &acts[l];
                for o in 0..n_out {
                    let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += delta[o] * a;
                    }
                    grad[off + n_in * n_out + o] += delta[o];
                }
                if l == 0 {
                    break;
                }
                let w = &self.params[off..off + n_in * n_out];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|o| w[o * n_in + i] * delta[o]).sum();
                        let a = input[i];
                        back * a * (1.0 - a)
                    })
                    .collect();
            }
        }
        (loss, grad)
    }
}

impl Regressor for Mlp {
    fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn predict_row(&self, x: &[f64]) -> f64 {
        let o = self.activations(&self.params, x).last().map_or(0.0, |o| o[0]);
        self.target_mean + self.target_scale * o
    }
}

/// Training outcome: the fitted network and the mean batch loss per epoch
/// (in scaled target units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFit {
    pub model: Mlp,
    pub loss_history: Vec<f64>,
}

/// Trains with mini-batch Adam. Rows are first put in a canonical order so
/// the result does not depend on how the caller ordered them; batches are
/// then drawn from a seeded shuffle each epoch. Targets are standardised
/// internally and predictions mapped back.
pub fn mlp_train(x: &[Vec<f64>], y: &[f64], spec: &MlpSpec, params: TrainParams, seed: u64) -> Result<MlpFit> {
    if params.epochs == 0 {
        return Err(Error::InvalidInput("epochs must be at least 1".into()));
    }
    if y.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    if spec.hidden.contains(&0) {
        return Err(Error::InvalidInput("hidden layer widths must be positive".into()));
    }
    let dim = x[0].len();
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(y[a].total_cmp(&y[b]))
    });
    let xs: Vec<&[f64]> = order.iter().map(|&i| x[i].as_slice()).collect();
    let sorted: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let n = y.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let ys: Vec<f64> = sorted.iter().map(|v| (v - mean) / scale).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::init(dim, spec, &mut rng);
    net.target_mean = mean;
    net.target_scale = scale;
    let mut adam = AdamState::new(net.params.len());
    let batch = params.batch_size.max(1);
    let mut perm: Vec<usize> = (0..ys.len()).collect();
    let mut history = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        perm.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in perm.chunks(batch) {
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| xs[i]).collect();
            let by: Vec<f64> = chunk.iter().map(|&i| ys[i]).collect();
            let (loss, grad) = net.loss_and_gradient(&bx, &by);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch}, batch {batches}"
                )));
            }
            adam.step(&mut net.params, &grad, spec.learning_rate);
            total += loss;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok(MlpFit {
        model: net,
        loss_history: history,
    })
}
