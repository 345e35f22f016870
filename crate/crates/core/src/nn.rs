//! Dense feed-forward networks with manual backpropagation and Adam.
//!
//! Matrices are batch-first: a layer computes `Z = X·W + b` with `W` of shape
//! `(fan_in, fan_out)`. Losses are expected to be batch means, so the output gradient
//! handed to [`Mlp::backward`] already carries the `1/N` factor.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Large negative constant added to logits or q-values of unavailable actions.
pub const MASK_VALUE: f64 = -3.4e38;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputActivation {
    Linear,
    /// `mid + half · tanh(z)`, bounded to `[min, max]`.
    TanhScaled {
        min: f64,
        max: f64,
    },
}

/// Multi-layer perceptron with ReLU hidden layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "MlpCheckpoint", try_from = "MlpCheckpoint")]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    output: OutputActivation,
    version: u64,
}

/// JSON layout of a network: row-major nested weight arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub output: OutputActivation,
}

impl From<Mlp> for MlpCheckpoint {
    fn from(net: Mlp) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| w.outer_iter().map(|row| row.to_vec()).collect())
                .collect(),
            biases: net.biases.iter().map(|b| b.to_vec()).collect(),
            layer_sizes: net.layer_sizes,
            output: net.output,
        }
    }
}

impl TryFrom<MlpCheckpoint> for Mlp {
    type Error = Error;

    fn try_from(c: MlpCheckpoint) -> Result<Self> {
        let layers = c.layer_sizes.len().saturating_sub(1);
        if c.layer_sizes.len() < 2 || c.weights.len() != layers || c.biases.len() != layers {
            return Err(Error::InvalidArgument("inconsistent checkpoint layer counts".into()));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (k, (w, b)) in c.weights.iter().zip(&c.biases).enumerate() {
            let (fan_in, fan_out) = (c.layer_sizes[k], c.layer_sizes[k + 1]);
            if w.len() != fan_in || w.iter().any(|r| r.len() != fan_out) {
                return Err(Error::ShapeMismatch {
                    expected: fan_in * fan_out,
                    got: w.iter().map(Vec::len).sum(),
                });
            }
            if b.len() != fan_out {
                return Err(Error::ShapeMismatch {
                    expected: fan_out,
                    got: b.len(),
                });
            }
            let flat: Vec<f64> = w.iter().flatten().copied().collect();
            weights.push(Array2::from_shape_vec((fan_in, fan_out), flat).expect("checked shape"));
            biases.push(Array1::from(b.clone()));
        }
        Ok(Mlp {
            layer_sizes: c.layer_sizes,
            weights,
            biases,
            output: c.output,
            version: fresh_version(),
        })
    }
}

/// Intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Array2<f64>>,
    version: u64,
}

impl Cache {
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

/// Per-parameter tensors shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    /// Global L2 norm over all entries.
    pub fn norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|w| w.iter().map(|x| x * x).sum::<f64>()).sum();
        let b: f64 = self.biases.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()).sum();
        (w + b).sqrt()
    }

    fn flat_get(&self, idx: ParamIndex) -> f64 {
        match idx {
            ParamIndex::Weight(k, i, j) => self.weights[k][[i, j]],
            ParamIndex::Bias(k, j) => self.biases[k][j],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ParamIndex {
    Weight(usize, usize, usize),
    Bias(usize, usize),
}

impl Mlp {
    /// Weights `~ U(−1/√fan_in, 1/√fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], output: OutputActivation, rng: &mut R) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network needs >= 2 non-empty layers, got {layer_sizes:?}"
            )));
        }
        if let OutputActivation::TanhScaled { min, max } = output {
            if !(min < max) {
                return Err(Error::InvalidArgument("tanh output range needs min < max".into()));
            }
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| {
                rng.random_range(-bound..=bound)
            }));
            biases.push(Array1::zeros(w[1]));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            output,
            version: fresh_version(),
        })
    }

    /// Builds a network from explicit parameters (`weights[k]` of shape `(fan_in, fan_out)`).
    pub fn from_parameters(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        output: OutputActivation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidArgument(
                "weights and biases must be non-empty and paired".into(),
            ));
        }
        let mut sizes = vec![weights[0].nrows()];
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != sizes[k] {
                return Err(Error::ShapeMismatch {
                    expected: sizes[k],
                    got: w.nrows(),
                });
            }
            if b.len() != w.ncols() {
                return Err(Error::ShapeMismatch {
                    expected: w.ncols(),
                    got: b.len(),
                });
            }
            sizes.push(w.ncols());
        }
        Ok(Self {
            layer_sizes: sizes,
            weights,
            biases,
            output,
            version: fresh_version(),
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn touch(&mut self) {
        self.version = fresh_version();
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_size() {
            return Err(Error::ShapeMismatch {
                expected: self.input_size(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn apply_output(&self, z: &mut Array2<f64>) {
        if let OutputActivation::TanhScaled { min, max } = self.output {
            let (mid, half) = (0.5 * (min + max), 0.5 * (max - min));
            z.mapv_inplace(|v| mid + half * v.tanh());
        }
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.weights.len() - 1;
        let mut h = x.dot(&self.weights[0]) + &self.biases[0];
        for k in 0..last {
            h.mapv_inplace(|v| v.max(0.0));
            h = h.dot(&self.weights[k + 1]) + &self.biases[k + 1];
        }
        self.apply_output(&mut h);
        Ok(h)
    }

    /// Single-sample forward pass.
    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass keeping the values needed by [`Mlp::backward`].
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Cache)> {
        self.check_input(&x)?;
        let n_layers = self.weights.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut h = x.to_owned();
        for k in 0..n_layers {
            let z = h.dot(&self.weights[k]) + &self.biases[k];
            inputs.push(h);
            h = if k + 1 < n_layers {
                z.mapv(|v| v.max(0.0))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        self.apply_output(&mut h);
        Ok((
            h,
            Cache {
                inputs,
                pre,
                version: self.version,
            },
        ))
    }

    /// Reverse-mode gradients for all parameters and the input, given `dL/d output`.
    pub fn backward(&self, cache: &Cache, output_grad: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        if cache.version != self.version {
            return Err(Error::StaleCache);
        }
        let n_layers = self.weights.len();
        let last_pre = &cache.pre[n_layers - 1];
        if output_grad.dim() != last_pre.dim() {
            return Err(Error::ShapeMismatch {
                expected: last_pre.len(),
                got: output_grad.len(),
            });
        }
        let mut delta = match self.output {
            OutputActivation::Linear => output_grad.to_owned(),
            OutputActivation::TanhScaled { min, max } => {
                let half = 0.5 * (max - min);
                let mut d = output_grad.to_owned();
                d.zip_mut_with(last_pre, |g, &z| {
                    let t = z.tanh();
                    *g *= half * (1.0 - t * t);
                });
                d
            }
        };
        let mut gw = vec![Array2::zeros((0, 0)); n_layers];
        let mut gb = vec![Array1::zeros(0); n_layers];
        for k in (0..n_layers).rev() {
            gw[k] = cache.inputs[k].t().dot(&delta);
            gb[k] = delta.sum_axis(Axis(0));
            let mut upstream = delta.dot(&self.weights[k].t());
            if k > 0 {
                upstream.zip_mut_with(&cache.pre[k - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            delta = upstream;
        }
        Ok((
            Gradients {
                weights: gw,
                biases: gb,
            },
            delta,
        ))
    }

    /// `θ′ ← τθ + (1 − τ)θ′` with `self` as θ′.
    pub fn soft_update(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.weights.iter_mut().zip(&source.weights) {
            t.zip_mut_with(s, |a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
        for (t, s) in self.biases.iter_mut().zip(&source.biases) {
            t.zip_mut_with(s, |a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
        self.touch();
    }

    fn param_indices(&self) -> Vec<ParamIndex> {
        let mut out = Vec::with_capacity(self.param_count());
        for (k, w) in self.weights.iter().enumerate() {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out.push(ParamIndex::Weight(k, i, j));
                }
            }
            for j in 0..self.biases[k].len() {
                out.push(ParamIndex::Bias(k, j));
            }
        }
        out
    }

    fn param_mut(&mut self, idx: ParamIndex) -> &mut f64 {
        self.version = fresh_version();
        match idx {
            ParamIndex::Weight(k, i, j) => &mut self.weights[k][[i, j]],
            ParamIndex::Bias(k, j) => &mut self.biases[k][j],
        }
    }

    fn relu_pattern(&self, x: ArrayView2<f64>) -> Vec<bool> {
        let (_, cache) = self.forward(x).expect("checked input");
        let hidden = cache.pre.len() - 1;
        cache.pre[..hidden]
            .iter()
            .flat_map(|z| z.iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Numerically stable softmax (shift by the maximum).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax`, stable for masked entries.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Jacobian row `∂ log softmax(x)_i / ∂x_j = δ_ij − softmax(x)_j`.
pub fn log_softmax_grad(logits: &[f64], i: usize) -> Vec<f64> {
    let p = softmax(logits);
    p.iter()
        .enumerate()
        .map(|(j, &pj)| if i == j { 1.0 - pj } else { -pj })
        .collect()
}

/// Adds [`MASK_VALUE`] to every entry whose mask bit is false.
pub fn apply_mask(values: &mut [f64], mask: &[bool]) {
    for (v, &m) in values.iter_mut().zip(mask) {
        if !m {
            *v += MASK_VALUE;
        }
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Adam optimizer state with L2 regularization on weights.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64, l2: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    /// One update `θ ← θ − α·m̂/(√v̂ + ε)` with `g = ∇ + λ·w` on weights.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.weights.len() != net.weights.len()
            || grads.weights.iter().zip(&net.weights).any(|(g, w)| g.dim() != w.dim())
            || grads.biases.iter().zip(&net.biases).any(|(g, b)| g.dim() != b.dim())
        {
            return Err(Error::ShapeMismatch {
                expected: net.param_count(),
                got: grads.weights.iter().map(|g| g.len()).sum::<usize>()
                    + grads.biases.iter().map(|g| g.len()).sum::<usize>(),
            });
        }
        self.t += 1;
        let (b1, b2, lr, eps, l2) = (self.beta1, self.beta2, self.lr, self.eps, self.l2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for k in 0..net.weights.len() {
            let w = &mut net.weights[k];
            let (m, v) = (&mut self.m.weights[k], &mut self.v.weights[k]);
            ndarray::Zip::from(w)
                .and(&grads.weights[k])
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + l2 * *p;
                    update(p, g, m, v)
                });
            let b = &mut net.biases[k];
            let (m, v) = (&mut self.m.biases[k], &mut self.v.biases[k]);
            ndarray::Zip::from(b)
                .and(&grads.biases[k])
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        net.touch();
        Ok(())
    }
}

/// Loss function used by [`grad_check`]: returns the scalar loss and `dL/d output`.
pub type LossFn<'a> = dyn Fn(&Array2<f64>) -> (f64, Array2<f64>) + 'a;

/// Maximum relative error between backpropagated and central-difference gradients.
///
/// Checks every parameter, or a random subset of `max_params` when the network is
/// larger. Parameters whose perturbation flips a ReLU on or off are skipped, since the
/// loss is not differentiable there.
pub fn grad_check<R: Rng + ?Sized>(
    net: &Mlp,
    input: ArrayView2<f64>,
    loss: &LossFn<'_>,
    max_params: usize,
    rng: &mut R,
) -> Result<f64> {
    let (out, cache) = net.forward(input)?;
    let (_, dout) = loss(&out);
    let (grads, _) = net.backward(&cache, dout.view())?;
    grad_check_against(net, input, loss, &grads, max_params, rng)
}

/// Same as [`grad_check`] with externally supplied analytic gradients.
pub fn grad_check_against<R: Rng + ?Sized>(
    net: &Mlp,
    input: ArrayView2<f64>,
    loss: &LossFn<'_>,
    analytic: &Gradients,
    max_params: usize,
    rng: &mut R,
) -> Result<f64> {
    const H: f64 = 1e-5;
    let mut indices = net.param_indices();
    if indices.len() > max_params {
        // Partial Fisher–Yates for a uniform subset.
        for i in 0..max_params {
            let j = rng.random_range(i..indices.len());
            indices.swap(i, j);
        }
        indices.truncate(max_params);
    }
    let base_pattern = net.relu_pattern(input);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for idx in indices {
        let original = *probe.param_mut(idx);
        *probe.param_mut(idx) = original + H;
        let plus_pattern = probe.relu_pattern(input);
        let lp = loss(&probe.predict(input)?).0;
        *probe.param_mut(idx) = original - H;
        let minus_pattern = probe.relu_pattern(input);
        let lm = loss(&probe.predict(input)?).0;
        *probe.param_mut(idx) = original;
        if plus_pattern != base_pattern || minus_pattern != base_pattern {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * H);
        let a = analytic.flat_get(idx);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}
