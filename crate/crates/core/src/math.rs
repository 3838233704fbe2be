//! Dense MLP encoder, its reverse-mode gradient, and optimiser steps.
//!
//! Parameters are stored as `f64` values that are always exactly
//! representable as `f32`; every operation producing new parameters rounds
//! through `f32`. Reductions accumulate in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Added to the L2 norm before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Round to the nearest `f32` and widen back.
#[inline]
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// A unit-norm representation vector stored in single precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    /// L2-normalises `raw` (with [`NORM_EPS`] guarding zero vectors).
    pub fn normalized(raw: &[f64]) -> Self {
        let n = l2_norm(raw) + NORM_EPS;
        FeatureVector(raw.iter().map(|&v| (v / n) as f32).collect())
    }

    /// Wraps values as-is. Callers are responsible for unit norm.
    pub fn from_values(values: Vec<f32>) -> Self {
        FeatureVector(values)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// `q · self` accumulated in f64.
    #[inline]
    pub fn dot(&self, q: &[f64]) -> f64 {
        self.0.iter().zip(q).map(|(&a, &b)| a as f64 * b).sum()
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One affine layer; `weight` is `rows × cols` row-major (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.weight[r * self.cols..(r + 1) * self.cols];
                self.bias[r] + dot(row, input)
            })
            .collect()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.weight.len() == other.weight.len()
            && self.bias.len() == other.bias.len()
    }
}

/// Weights and biases of the encoder: tanh on every hidden layer, linear
/// output layer, L2 normalisation on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    layers: Vec<Layer>,
}

/// Gradient of a scalar loss with respect to an [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layers: Vec<Layer>,
}

fn check_chain(layers: &[Layer]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::ShapeMismatch("encoder needs at least one layer".into()));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.rows == 0 || l.cols == 0 {
            return Err(Error::ShapeMismatch(format!("layer {i} has a zero dimension")));
        }
        if l.weight.len() != l.rows * l.cols || l.bias.len() != l.rows {
            return Err(Error::ShapeMismatch(format!(
                "layer {i} buffers do not match {}x{}",
                l.rows, l.cols
            )));
        }
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].rows != pair[1].cols {
            return Err(Error::ShapeMismatch(format!(
                "layer {i} outputs {} but layer {} expects {}",
                pair[0].rows,
                i + 1,
                pair[1].cols
            )));
        }
    }
    Ok(())
}

impl EncoderParams {
    /// Builds from explicit layers, validating the dimension chain and
    /// rounding every value to f32 precision.
    pub fn from_layers(mut layers: Vec<Layer>) -> Result<Self> {
        check_chain(&layers)?;
        for l in &mut layers {
            l.values_mut().for_each(|v| *v = round_f32(*v));
        }
        Ok(EncoderParams { layers })
    }

    /// Xavier-uniform weights and zero biases for `dims = [in, h1, ..., out]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "encoder needs an input and an output dimension".into(),
            ));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let mut layer = Layer::zeros(rows, cols);
                for v in &mut layer.weight {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters in layer order (weights then bias per layer).
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    /// Overwrites parameters from a flat vector in [`flat`](Self::flat)
    /// order, without rounding. Intended for numerical probing.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "set_flat",
                expected: self.num_params(),
                actual: values.len(),
            });
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for v in l.values_mut() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    /// FNV-1a over the f32 little-endian bytes of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let bytes: Vec<u8> = self
            .layers
            .iter()
            .flat_map(|l| l.values().flat_map(|v| (*v as f32).to_le_bytes()))
            .collect();
        crate::rng::fnv1a64(&bytes)
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "encoder input",
                expected: self.input_dim(),
                actual: width,
            });
        }
        Ok(())
    }

    /// Normalised output for one input row, in f64.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        Ok(self.trace(x).output)
    }

    /// Forward pass keeping the activations needed by [`backward`](Self::backward).
    pub fn trace(&self, x: &[f64]) -> ForwardTrace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = layer.apply(&h);
            if i < last {
                a.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(h);
            h = a;
        }
        let norm = l2_norm(&h);
        let denom = norm + NORM_EPS;
        let output = h.iter().map(|v| v / denom).collect();
        ForwardTrace {
            inputs,
            pre_norm: h,
            norm,
            output,
        }
    }

    /// Accumulates into `grads` the parameter gradient given the gradient of
    /// the loss with respect to the normalised output of `trace`.
    pub fn backward(&self, trace: &ForwardTrace, grad_output: &[f64], grads: &mut GradientSet) {
        let denom = trace.norm + NORM_EPS;
        let u = &trace.pre_norm;
        // d(u / (|u| + eps)) / du applied to grad_output.
        let ug = dot(u, grad_output);
        let radial = if trace.norm > 0.0 {
            ug / (trace.norm * denom * denom)
        } else {
            0.0
        };
        let mut delta: Vec<f64> = grad_output
            .iter()
            .zip(u)
            .map(|(g, ui)| g / denom - ui * radial)
            .collect();

        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &trace.inputs[i];
            let g = &mut grads.layers[i];
            for (r, &d) in delta.iter().enumerate() {
                g.bias[r] += d;
                let row = &mut g.weight[r * layer.cols..(r + 1) * layer.cols];
                row.iter_mut().zip(input).for_each(|(w, x)| *w += d * x);
            }
            if i > 0 {
                // input[i] = tanh(a_{i-1}); derivative is 1 - input^2.
                let mut next = vec![0.0; layer.cols];
                for (r, &d) in delta.iter().enumerate() {
                    let row = &layer.weight[r * layer.cols..(r + 1) * layer.cols];
                    next.iter_mut().zip(row).for_each(|(n, w)| *n += d * w);
                }
                next.iter_mut()
                    .zip(input)
                    .for_each(|(n, h)| *n *= 1.0 - h * h);
                delta = next;
            }
        }
    }
}

/// Activations recorded by [`EncoderParams::trace`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Vec<f64>>,
    pre_norm: Vec<f64>,
    norm: f64,
    pub output: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        GradientSet {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.values())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        check_chain(&layers)?;
        Ok(GradientSet { layers })
    }
}

/// Encodes each row of `batch` and returns unit-norm features.
pub fn encoder_forward(params: &EncoderParams, batch: &[Vec<f32>]) -> Result<Vec<FeatureVector>> {
    batch
        .iter()
        .map(|row| {
            let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            params.encode(&x).map(|z| FeatureVector::normalized(&z))
        })
        .collect()
}

/// A scalar loss over a batch of normalised query features.
pub trait QueryObjective {
    /// Loss value and its gradient with respect to each query.
    fn value_and_grad(&self, queries: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>;
}

/// Encodes `batch` with `params`, evaluates `objective` on the outputs and
/// backpropagates to the parameters.
pub fn loss_backward<O: QueryObjective + ?Sized>(
    params: &EncoderParams,
    batch: &[Vec<f64>],
    objective: &O,
) -> Result<(f64, GradientSet)> {
    for row in batch {
        params.check_input(row.len())?;
    }
    let traces: Vec<ForwardTrace> = batch.iter().map(|x| params.trace(x)).collect();
    let queries: Vec<Vec<f64>> = traces.iter().map(|t| t.output.clone()).collect();
    let (loss, query_grads) = objective.value_and_grad(&queries)?;
    Ok((loss, backprop(params, &traces, &query_grads)))
}

/// Sums the parameter gradients of every traced row.
pub fn backprop(params: &EncoderParams, traces: &[ForwardTrace], query_grads: &[Vec<f64>]) -> GradientSet {
    let mut grads = GradientSet::zeros_like(params);
    for (trace, g) in traces.iter().zip(query_grads) {
        params.backward(trace, g, &mut grads);
    }
    grads
}

/// `θ ← θ − lr·(g + weight_decay·θ)`.
pub fn sgd_step(
    params: &EncoderParams,
    grads: &GradientSet,
    lr: f64,
    weight_decay: f64,
) -> Result<EncoderParams> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
    }
    if params.layers.len() != grads.layers.len()
        || !params.layers.iter().zip(&grads.layers).all(|(a, b)| a.same_shape(b))
    {
        return Err(Error::ShapeMismatch("gradient does not match parameters".into()));
    }
    let mut out = params.clone();
    for (layer, g) in out.layers.iter_mut().zip(&grads.layers) {
        for (p, gv) in layer.values_mut().zip(g.values()) {
            *p = round_f32(*p - lr * (gv + weight_decay * *p));
        }
    }
    Ok(out)
}

/// `θ_k ← μ·θ_k + (1 − μ)·θ_q`.
pub fn momentum_update(
    theta_k: &EncoderParams,
    theta_q: &EncoderParams,
    mu: f64,
) -> Result<EncoderParams> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidArgument(format!("momentum {mu} outside [0, 1]")));
    }
    if !theta_k.same_shape(theta_q) {
        return Err(Error::ShapeMismatch("momentum and main encoders differ".into()));
    }
    let mut out = theta_k.clone();
    for (layer, q) in out.layers.iter_mut().zip(&theta_q.layers) {
        for (k, qv) in layer.values_mut().zip(q.values()) {
            *k = round_f32(mu * *k + (1.0 - mu) * qv);
        }
    }
    Ok(out)
}
