//! The local denoiser `ε_φ(x_{i−k:i+k}(t), t)`.
//!
//! A residual MLP over a flattened window of `2k+1` states concatenated with
//! a sinusoidal embedding of `t`:
//!
//! ```text
//! h = W₀·[window | emb(t)] + b₀
//! h = h + W₂·silu(W₁·LN(h) + b₁) + b₂      (repeated per block)
//! ε = W_out·silu(LN(h)) + b_out            (W_out, b_out start at zero)
//! ```
//!
//! The score is recovered as `s = −ε / σ(t)`. Windows carry no position
//! index: the chain is assumed stationary.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, NodeId};
use crate::composition::LocalScore;
use crate::diffusion::DiffusionSchedule;
use crate::error::{check_finite, check_len, Error, Result};
use crate::rng;

/// Rows per independent tape when a batch is split across workers. Fixed so
/// that reductions happen in the same order whatever the thread count.
const CHUNK_ROWS: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub window_radius: usize,
    pub state_dim: usize,
    pub hidden_features: usize,
    pub residual_blocks: usize,
    #[serde(default = "default_time_embedding")]
    pub time_embedding_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_time_embedding() -> usize {
    16
}

impl NetworkConfig {
    pub fn window_len(&self) -> usize {
        2 * self.window_radius + 1
    }

    /// Number of values in one flattened window.
    pub fn window_size(&self) -> usize {
        self.window_len() * self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.window_size() + self.time_embedding_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("network {what} must be positive")));
        if self.window_radius == 0 {
            return bad("window_radius");
        }
        if self.state_dim == 0 {
            return bad("state_dim");
        }
        if self.hidden_features == 0 {
            return bad("hidden_features");
        }
        if self.residual_blocks == 0 {
            return bad("residual_blocks");
        }
        if self.time_embedding_dim == 0 || !self.time_embedding_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "time_embedding_dim must be a positive even number".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layout_for(config: &NetworkConfig) -> Vec<LayerShape> {
    let h = config.hidden_features;
    let mut layout = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, rows: usize, cols: usize| {
        layout.push(LayerShape {
            name,
            offset,
            rows,
            cols,
        });
        offset += rows * cols;
    };
    push("input.weight".into(), h, config.input_dim());
    push("input.bias".into(), 1, h);
    for b in 0..config.residual_blocks {
        push(format!("block{b}.norm.gain"), 1, h);
        push(format!("block{b}.norm.shift"), 1, h);
        push(format!("block{b}.fc1.weight"), h, h);
        push(format!("block{b}.fc1.bias"), 1, h);
        push(format!("block{b}.fc2.weight"), h, h);
        push(format!("block{b}.fc2.bias"), 1, h);
    }
    push("output.weight".into(), config.window_size(), h);
    push("output.bias".into(), 1, config.window_size());
    layout
}

/// Network weights: a flat vector plus the shape of every layer inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: NetworkConfig,
    values: Vec<f64>,
    layout: Vec<LayerShape>,
}

impl Parameters {
    /// Deterministic initialization from `config.seed`.
    ///
    /// Linear layers draw from `U(−1/√fan_in, 1/√fan_in)`, normalization gains
    /// start at one, and the output layer is zero so that `ε_φ ≡ 0`.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = layout_for(&config);
        let total = layout.last().map_or(0, |l| l.offset + l.len());
        let mut values = vec![0.0; total];
        let mut rng = rng::stream(config.seed, 0);
        for layer in &layout {
            let slot = &mut values[layer.offset..layer.offset + layer.len()];
            if layer.name.starts_with("output.weight") || layer.name.starts_with("output.bias") {
                continue;
            }
            if layer.name.ends_with("norm.gain") {
                slot.fill(1.0);
            } else if layer.name.ends_with("norm.shift") {
                continue;
            } else {
                let fan_in = if layer.name.ends_with("weight") {
                    layer.cols
                } else {
                    // biases share the bound of their weight matrix
                    layout
                        .iter()
                        .find(|l| l.name == layer.name.replace("bias", "weight"))
                        .map_or(layer.cols, |l| l.cols)
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in slot.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(Self {
            config,
            values,
            layout,
        })
    }

    pub fn from_values(config: NetworkConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = layout_for(&config);
        let total = layout.last().map_or(0, |l| l.offset + l.len());
        check_len(total, values.len())?;
        check_finite(&values, || "network parameters".into())?;
        Ok(Self {
            config,
            values,
            layout,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layout(&self) -> &[LayerShape] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn layer(&self, name: &str) -> &LayerShape {
        self.layout
            .iter()
            .find(|l| l.name == name)
            .expect("layout is generated from the same config")
    }

    fn param_node(&self, graph: &mut Graph, name: &str, trainable: bool) -> Result<NodeId> {
        let l = self.layer(name);
        graph.param(&self.values, l.offset, l.rows, l.cols, trainable)
    }

    /// Records the network on `graph`. Returns the window input node and the output node.
    pub fn record(
        &self,
        graph: &mut Graph,
        windows: &[f64],
        times: &[f64],
        input_grad: bool,
        param_grad: bool,
    ) -> Result<(NodeId, NodeId)> {
        let rows = times.len();
        let size = self.config.window_size();
        check_len(rows * size, windows.len())?;
        let x = graph.input(Matrix::new(rows, size, windows.to_vec())?, input_grad);
        let emb = graph.input(time_embedding(times, self.config.time_embedding_dim), false);
        let z = graph.concat(x, emb)?;

        let w = self.param_node(graph, "input.weight", param_grad)?;
        let b = self.param_node(graph, "input.bias", param_grad)?;
        let mut h = graph.affine(z, w, b)?;
        for blk in 0..self.config.residual_blocks {
            let p = |s: &str| format!("block{blk}.{s}");
            let gain = self.param_node(graph, &p("norm.gain"), param_grad)?;
            let shift = self.param_node(graph, &p("norm.shift"), param_grad)?;
            let w1 = self.param_node(graph, &p("fc1.weight"), param_grad)?;
            let b1 = self.param_node(graph, &p("fc1.bias"), param_grad)?;
            let w2 = self.param_node(graph, &p("fc2.weight"), param_grad)?;
            let b2 = self.param_node(graph, &p("fc2.bias"), param_grad)?;
            let n = graph.layer_norm(h, gain, shift)?;
            let a = graph.affine(n, w1, b1)?;
            let a = graph.silu(a);
            let r = graph.affine(a, w2, b2)?;
            h = graph.add(h, r)?;
        }
        let w = self.param_node(graph, "output.weight", param_grad)?;
        let b = self.param_node(graph, "output.bias", param_grad)?;
        let out = graph.affine(h, w, b)?;
        Ok((x, out))
    }

    /// `ε_φ(window, t)` for a single flattened window.
    pub fn eps_eval(&self, window: &[f64], t: f64) -> Result<Vec<f64>> {
        self.eps_batch(window, &[t])
    }

    /// `ε_φ` for a batch of windows, one time per window.
    pub fn eps_batch(&self, windows: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        let size = self.config.window_size();
        check_len(times.len() * size, windows.len())?;
        check_finite(windows, || "network input".into())?;
        check_finite(times, || "network time input".into())?;
        let chunks: Vec<Result<Vec<f64>>> = times
            .par_chunks(CHUNK_ROWS)
            .zip(windows.par_chunks(CHUNK_ROWS * size))
            .map(|(ts, ws)| {
                let mut g = Graph::new();
                let (_, out) = self.record(&mut g, ws, ts, false, false)?;
                Ok(g.value(out).data.clone())
            })
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// `(∂ε_φ/∂window)ᵀ · cotangent` for every window of the batch.
    pub fn eps_vjp(&self, windows: &[f64], times: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let size = self.config.window_size();
        check_len(times.len() * size, windows.len())?;
        check_len(windows.len(), cotangent.len())?;
        check_finite(windows, || "network input".into())?;
        let chunks: Vec<Result<Vec<f64>>> = times
            .par_chunks(CHUNK_ROWS)
            .zip(windows.par_chunks(CHUNK_ROWS * size))
            .zip(cotangent.par_chunks(CHUNK_ROWS * size))
            .map(|((ts, ws), cs)| {
                let mut g = Graph::new();
                let (x, out) = self.record(&mut g, ws, ts, true, false)?;
                let grads = g.backward(out, Matrix::new(ts.len(), size, cs.to_vec())?)?;
                Ok(grads
                    .of(x)
                    .map_or_else(|| vec![0.0; ws.len()], |m| m.data.clone()))
            })
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Mean denoising loss `(1/B)·Σ_b ‖ε_φ(μ_b x_b + σ_b ε_b, t_b) − ε_b‖²` and
    /// its gradient with respect to the parameters.
    pub fn dsm_loss_and_grad(
        &self,
        schedule: &DiffusionSchedule,
        clean: &[f64],
        times: &[f64],
        eps: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let size = self.config.window_size();
        let rows = times.len();
        check_len(rows * size, clean.len())?;
        check_len(clean.len(), eps.len())?;
        let scale = 1.0 / rows as f64;
        let mut perturbed = vec![0.0; clean.len()];
        for (r, &t) in times.iter().enumerate() {
            let (mu, sigma) = schedule.coefficients(t)?;
            for i in r * size..(r + 1) * size {
                perturbed[i] = mu * clean[i] + sigma * eps[i];
            }
        }
        let chunks: Vec<Result<(f64, Vec<f64>)>> = times
            .par_chunks(CHUNK_ROWS)
            .zip(perturbed.par_chunks(CHUNK_ROWS * size))
            .zip(eps.par_chunks(CHUNK_ROWS * size))
            .map(|((ts, ws), es)| {
                crate::autodiff::grad(&self.values, |g, _| {
                    let (_, out) = self.record(g, ws, ts, false, true)?;
                    let target = g.input(Matrix::new(ts.len(), size, es.to_vec())?, false);
                    g.squared_error(out, Some(target), scale)
                })
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.values.len()];
        for c in chunks {
            let (l, g) = c?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((loss, grad))
    }
}

/// Sinusoidal features `[sin(ω_j t) | cos(ω_j t)]` with `ω_j = π·j`, `j = 1..=dim/2`.
pub fn time_embedding(times: &[f64], dim: usize) -> Matrix {
    let half = dim / 2;
    let freqs: Vec<f64> = (1..=half).map(|j| std::f64::consts::PI * j as f64).collect();
    let mut m = Matrix::zeros(times.len(), dim);
    for (r, &t) in times.iter().enumerate() {
        for (j, w) in freqs.iter().enumerate() {
            let (s, c) = (w * t).sin_cos();
            m.data[r * dim + j] = s;
            m.data[r * dim + half + j] = c;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Length of the linearly decaying learning-rate schedule.
    pub total_steps: u64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64, total_steps: u64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
        }
    }

    /// Learning rate applied by the update following `step` completed steps.
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.learning_rate;
        }
        let remaining = 1.0 - step as f64 / self.total_steps as f64;
        self.learning_rate * remaining.max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled, multiplicative weight decay.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    check_len(params.len(), grads.len())?;
    check_len(params.len(), state.m.len())?;
    let c = &state.config;
    let lr = c.rate_at(state.step);
    state.step += 1;
    let bc1 = 1.0 - c.beta1.powi(state.step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step.min(i32::MAX as u64) as i32);
    let decay = 1.0 - lr * c.weight_decay;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(())
}

/// The network as a local score `s = −ε_φ / σ(t)`.
#[derive(Clone, Debug)]
pub struct NetworkScore {
    pub params: Parameters,
    pub schedule: DiffusionSchedule,
}

impl NetworkScore {
    pub fn new(params: Parameters) -> Self {
        Self {
            params,
            schedule: DiffusionSchedule::vp_cosine(),
        }
    }

    fn inv_sigma(&self, t: f64) -> Result<f64> {
        let sigma = self.schedule.sigma(t)?;
        if sigma <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "a noise-prediction network has no score at σ(t) = 0 (t = {t})"
            )));
        }
        Ok(1.0 / sigma)
    }
}

impl LocalScore for NetworkScore {
    fn radius(&self) -> usize {
        self.params.config().window_radius
    }

    fn state_dim(&self) -> usize {
        self.params.config().state_dim
    }

    fn window_scores(&self, windows: &[f64], _starts: &[usize], t: f64) -> Result<Vec<f64>> {
        let inv = self.inv_sigma(t)?;
        let n = windows.len() / self.params.config().window_size();
        let mut eps = self.params.eps_batch(windows, &vec![t; n])?;
        eps.iter_mut().for_each(|e| *e *= -inv);
        Ok(eps)
    }

    fn window_vjp(
        &self,
        windows: &[f64],
        _starts: &[usize],
        t: f64,
        cotangent: &[f64],
    ) -> Result<Vec<f64>> {
        let inv = self.inv_sigma(t)?;
        let n = windows.len() / self.params.config().window_size();
        let mut g = self.params.eps_vjp(windows, &vec![t; n], cotangent)?;
        g.iter_mut().for_each(|e| *e *= -inv);
        Ok(g)
    }
}
