//! Softmax policies (linear or tanh hidden layers) with exact analytic
//! log-probability gradients.
//!
//! The softmax multiplies logits by the temperature, so temperature 1 uses
//! the raw network outputs and temperature 0 degenerates to a deterministic
//! argmax (ties broken by the lowest action index). Gradients are
//! hand-derived; no automatic differentiation is involved.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::Trajectory;
use crate::{Error, Result};

/// Architecture and temperature description of a softmax policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub input_dim: usize,
    /// Hidden tanh layer widths; empty means a linear model.
    pub hidden_dims: Vec<usize>,
    pub n_actions: usize,
    pub train_temperature: f64,
    pub eval_temperature: f64,
}

impl PolicySpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, n_actions: usize) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
            n_actions,
            train_temperature: 1.0,
            eval_temperature: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.n_actions < 2 {
            return Err(Error::invalid("n_actions must be at least 2"));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if self.train_temperature < 0.0 || self.eval_temperature < 0.0 {
            return Err(Error::invalid("temperatures must be non-negative"));
        }
        Ok(())
    }

    /// (rows, cols) of each weight matrix, input to output.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            shapes.push((h, fan_in));
            fan_in = h;
        }
        shapes.push((self.n_actions, fan_in));
        shapes
    }
}

/// One dense layer, row-major `rows x cols` weights plus a bias per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.bias[r];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// Dense weights of a softmax policy. The same layout doubles as the
/// gradient and optimizer-moment tensor type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: PolicySpec,
    pub layers: Vec<DenseLayer>,
}

impl PolicyParams {
    /// Weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero;
    /// logits start near zero so the initial policy is near-uniform.
    pub fn init(spec: PolicySpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(rows, cols)| {
                let bound = 1.0 / (cols as f64).sqrt();
                DenseLayer {
                    rows,
                    cols,
                    weights: (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
                    bias: vec![0.0; rows],
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// A same-shaped tensor of zeros (for gradients and moments).
    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.param_iter().all(|v| v.is_finite())
    }

    pub fn param_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn param_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// `self += c * other`, elementwise over the shared layout.
    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.param_iter_mut().zip(other.param_iter()) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.param_iter_mut() {
            *a *= c;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.param_iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Forward pass; returns raw logits and the post-activation of every
    /// layer input (starting with the observation itself).
    fn forward(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if obs.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                got: obs.len(),
            });
        }
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        activations.push(obs.to_vec());
        let mut buf = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            layer.forward(activations.last().unwrap(), &mut buf);
            if idx + 1 < self.layers.len() {
                activations.push(buf.iter().map(|z| z.tanh()).collect());
            }
        }
        Ok((buf, activations))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let params: Self = serde_json::from_str(&json)?;
        params.spec.validate()?;
        Ok(params)
    }
}

fn softmax(scaled: &[f64]) -> Vec<f64> {
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn argmax_one_hot(logits: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let mut probs = vec![0.0; logits.len()];
    probs[best] = 1.0;
    probs
}

/// Action probabilities `softmax(T * logits)`; temperature 0 selects the
/// argmax logit deterministically.
pub fn action_probabilities(
    params: &PolicyParams,
    obs: &[f64],
    temperature: f64,
) -> Result<Vec<f64>> {
    if temperature < 0.0 {
        return Err(Error::invalid("temperature must be non-negative"));
    }
    let (logits, _) = params.forward(obs)?;
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("policy logits"));
    }
    if temperature == 0.0 {
        return Ok(argmax_one_hot(&logits));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v * temperature).collect();
    Ok(softmax(&scaled))
}

/// Draw an action index from a probability vector.
pub fn sample_action(probs: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("action probabilities"));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "probabilities must be non-negative and sum to 1, got sum {sum}"
        )));
    }
    let u: f64 = rng.gen::<f64>() * sum;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probs.len() - 1)
}

/// Add the analytic gradient of `log pi(action | obs)` (at the train
/// temperature) into `acc`, which must share the parameter layout.
fn accumulate_log_prob_gradient(
    params: &PolicyParams,
    obs: &[f64],
    action: usize,
    acc: &mut PolicyParams,
) -> Result<()> {
    if action >= params.spec.n_actions {
        return Err(Error::OutOfRange(format!(
            "action {action} out of range for {} actions",
            params.spec.n_actions
        )));
    }
    let temperature = params.spec.train_temperature;
    let (logits, activations) = params.forward(obs)?;
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("policy logits"));
    }
    if temperature == 0.0 {
        // softmax(0 * y) has zero sensitivity to the parameters
        return Ok(());
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v * temperature).collect();
    let probs = softmax(&scaled);

    // d log pi(a) / d logit_j = T * (1{j == a} - pi_j)
    let mut delta: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| temperature * ((j == action) as u8 as f64 - p))
        .collect();

    for idx in (0..params.layers.len()).rev() {
        let layer = &params.layers[idx];
        let input = &activations[idx];
        {
            let g = &mut acc.layers[idx];
            for r in 0..layer.rows {
                g.bias[r] += delta[r];
                let row = &mut g.weights[r * layer.cols..(r + 1) * layer.cols];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += delta[r] * x;
                }
            }
        }
        if idx > 0 {
            // delta_prev = (W^T delta) * tanh'(z), and tanh(z) is the stored
            // activation, so tanh'(z) = 1 - a^2.
            let mut prev = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * delta[r];
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }
    Ok(())
}

/// Exact analytic gradient of `log pi(action | obs)` at the train
/// temperature, shaped like the parameters.
pub fn log_prob_gradient(params: &PolicyParams, obs: &[f64], action: usize) -> Result<PolicyParams> {
    let mut grad = params.zeros_like();
    accumulate_log_prob_gradient(params, obs, action, &mut grad)?;
    Ok(grad)
}

/// Sum of per-step log-probability gradients over a trajectory.
pub fn trajectory_score(params: &PolicyParams, trajectory: &Trajectory) -> Result<PolicyParams> {
    let mut score = params.zeros_like();
    for (obs, &action) in trajectory.states.iter().zip(&trajectory.actions) {
        accumulate_log_prob_gradient(params, obs, action, &mut score)?;
    }
    Ok(score)
}
