//! Small differentiable predictors.
//!
//! All three model kinds are stacks of affine layers with `tanh` between them:
//! linear regression and the softmax classifier are a single affine layer, the
//! MLP adds hidden layers. Parameters are laid out layer by layer, each layer
//! holding its row-major `out x in` weight matrix followed by its bias.
//!
//! Losses are means over the batch plus `(weight_decay / 2) * ||params||^2`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LinearRegression,
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Number of classes for classifiers, target width for regression.
    pub output_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values { values: Vec<f64>, dim: usize },
}

/// A set of examples with row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    input_dim: usize,
    targets: Targets,
}

impl Batch {
    pub fn classification(features: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Batch> {
        Self::build(features, input_dim, Targets::Classes(labels))
    }

    pub fn regression(
        features: Vec<f64>,
        input_dim: usize,
        values: Vec<f64>,
        output_dim: usize,
    ) -> Result<Batch> {
        Self::build(features, input_dim, Targets::Values { values, dim: output_dim })
    }

    fn build(features: Vec<f64>, input_dim: usize, targets: Targets) -> Result<Batch> {
        if input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if features.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if !features.len().is_multiple_of(input_dim) {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                found: features.len() % input_dim,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch features"));
        }
        let n = features.len() / input_dim;
        let targets_n = match &targets {
            Targets::Classes(labels) => labels.len(),
            Targets::Values { values, dim } => {
                if *dim == 0 || values.len() % dim != 0 {
                    return Err(Error::InvalidConfig("regression target width".into()));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("batch targets"));
                }
                values.len() / dim
            }
        };
        if targets_n != n {
            return Err(Error::DimensionMismatch { expected: n, found: targets_n });
        }
        Ok(Batch { features, input_dim, targets })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

impl ModelSpec {
    pub fn linear_regression(input_dim: usize, output_dim: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LinearRegression,
            input_dim,
            output_dim,
            hidden_dims: Vec::new(),
            weight_decay: 0.0,
        }
    }

    pub fn softmax(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Softmax,
            input_dim,
            output_dim: classes,
            hidden_dims: Vec::new(),
            weight_decay: 0.0,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, classes: usize) -> Self {
        ModelSpec { kind: ModelKind::Mlp, input_dim, output_dim: classes, hidden_dims, weight_decay: 0.0 }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn is_classifier(&self) -> bool {
        self.kind != ModelKind::LinearRegression
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        match self.kind {
            ModelKind::Mlp if self.hidden_dims.is_empty() => {
                return Err(Error::InvalidConfig("mlp needs at least one hidden layer".into()))
            }
            ModelKind::LinearRegression | ModelKind::Softmax if !self.hidden_dims.is_empty() => {
                return Err(Error::InvalidConfig("hidden_dims is only valid for mlp".into()))
            }
            _ => {}
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be a nonnegative number".into()));
        }
        Ok(())
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden_dims.len() + 2);
        sizes.push(self.input_dim);
        sizes.extend_from_slice(&self.hidden_dims);
        sizes.push(self.output_dim);
        sizes
    }

    /// Parameter dimension `d`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes().windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for w in self.layer_sizes().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, 1.0 / libm::sqrt(fan_in as f64)).expect("positive std");
            values.extend((0..fan_in * fan_out).map(|_| normal.sample(rng)));
            values.extend(core::iter::repeat_n(0.0, fan_out));
        }
        ParamVector::from_raw(values)
    }

    /// Mean per-example loss, without weight decay.
    pub fn data_loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        self.check_inputs(params, batch)?;
        let loss = self.forward_backward(params.as_slice(), batch, None);
        finite(loss, "loss")
    }

    /// Training loss: mean per-example loss plus the weight-decay penalty.
    pub fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        let data = self.data_loss(params, batch)?;
        finite(data + 0.5 * self.weight_decay * params.l2_norm_sq(), "loss")
    }

    pub fn gradient(&self, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        self.loss_and_gradient(params, batch).map(|(_, g)| g)
    }

    /// Training loss and its exact gradient in one pass.
    pub fn loss_and_gradient(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
        self.check_inputs(params, batch)?;
        let mut grad = vec![0.0; params.len()];
        let data = self.forward_backward(params.as_slice(), batch, Some(&mut grad));
        let n = batch.len() as f64;
        let wd = self.weight_decay;
        for (g, &p) in grad.iter_mut().zip(params.iter()) {
            *g = *g / n + wd * p;
        }
        let loss = finite(data + 0.5 * wd * params.l2_norm_sq(), "loss")?;
        Ok((loss, ParamVector::from_raw(grad).ensure_finite("gradient")?))
    }

    /// Fraction of examples whose arg-max class matches the label; ties go to
    /// the lowest class index.
    pub fn accuracy(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        if !self.is_classifier() {
            return Err(Error::Unsupported("accuracy of a regression model"));
        }
        self.check_inputs(params, batch)?;
        let Targets::Classes(labels) = &batch.targets else {
            unreachable!("checked by check_inputs")
        };
        let mut scratch = Scratch::new(&self.layer_sizes());
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| {
                self.forward(params.as_slice(), batch.row(i), &mut scratch);
                argmax(scratch.activations.last().unwrap()) == y
            })
            .count();
        Ok(correct as f64 / batch.len() as f64)
    }

    fn check_inputs(&self, params: &ParamVector, batch: &Batch) -> Result<()> {
        let d = self.param_count();
        if params.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: params.len() });
        }
        if batch.input_dim != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, found: batch.input_dim });
        }
        match (&batch.targets, self.is_classifier()) {
            (Targets::Classes(labels), true) => {
                if labels.iter().any(|&y| y >= self.output_dim) {
                    return Err(Error::InvalidConfig("label out of range for model".into()));
                }
            }
            (Targets::Values { dim, .. }, false) => {
                if *dim != self.output_dim {
                    return Err(Error::DimensionMismatch { expected: self.output_dim, found: *dim });
                }
            }
            _ => return Err(Error::Unsupported("targets do not match model kind")),
        }
        Ok(())
    }

    fn forward(&self, params: &[f64], x: &[f64], scratch: &mut Scratch) {
        scratch.activations[0].copy_from_slice(x);
        let layers = scratch.activations.len() - 1;
        let mut offset = 0;
        for l in 0..layers {
            let (inp, out) = (scratch.activations[l].len(), scratch.activations[l + 1].len());
            let (w, rest) = params[offset..].split_at(inp * out);
            let b = &rest[..out];
            offset += inp * out + out;
            let (head, tail) = scratch.activations.split_at_mut(l + 1);
            let (a_in, a_out) = (&head[l], &mut tail[0]);
            for (j, z) in a_out.iter_mut().enumerate() {
                let row = &w[j * inp..(j + 1) * inp];
                let s: f64 = row.iter().zip(a_in.iter()).map(|(wi, ai)| wi * ai).sum();
                *z = if l + 1 < layers { libm::tanh(s + b[j]) } else { s + b[j] };
            }
        }
    }

    /// Returns the mean data loss; accumulates the summed (not averaged)
    /// data-loss gradient into `grad` when given.
    fn forward_backward(&self, params: &[f64], batch: &Batch, mut grad: Option<&mut [f64]>) -> f64 {
        let sizes = self.layer_sizes();
        let layers = sizes.len() - 1;
        let mut scratch = Scratch::new(&sizes);
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for w in sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        let mut total = 0.0;
        let mut delta = vec![0.0; *sizes.iter().max().unwrap()];
        let mut delta_prev = delta.clone();
        for i in 0..batch.len() {
            self.forward(params, batch.row(i), &mut scratch);
            let out = scratch.activations.last().unwrap();
            let k = out.len();
            match &batch.targets {
                Targets::Classes(labels) => {
                    let y = labels[i];
                    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = out.iter().map(|&z| libm::exp(z - max)).sum();
                    let lse = max + libm::log(sum);
                    total += lse - out[y];
                    for (c, d) in delta[..k].iter_mut().enumerate() {
                        *d = libm::exp(out[c] - lse) - if c == y { 1.0 } else { 0.0 };
                    }
                }
                Targets::Values { values, dim } => {
                    let target = &values[i * dim..(i + 1) * dim];
                    let mut sq = 0.0;
                    for ((d, &z), &t) in delta[..k].iter_mut().zip(out).zip(target) {
                        *d = z - t;
                        sq += *d * *d;
                    }
                    total += 0.5 * sq;
                }
            }
            let Some(grad) = grad.as_deref_mut() else { continue };
            for l in (0..layers).rev() {
                let (inp, outw) = (sizes[l], sizes[l + 1]);
                let a_in = &scratch.activations[l];
                let base = offsets[l];
                for j in 0..outw {
                    let dj = delta[j];
                    let gw = &mut grad[base + j * inp..base + (j + 1) * inp];
                    for (g, &a) in gw.iter_mut().zip(a_in.iter()) {
                        *g += dj * a;
                    }
                    grad[base + inp * outw + j] += dj;
                }
                if l > 0 {
                    let w = &params[base..base + inp * outw];
                    for (q, dp) in delta_prev[..inp].iter_mut().enumerate() {
                        let back: f64 = (0..outw).map(|j| w[j * inp + q] * delta[j]).sum();
                        *dp = back * (1.0 - a_in[q] * a_in[q]);
                    }
                    core::mem::swap(&mut delta, &mut delta_prev);
                }
            }
        }
        total / batch.len() as f64
    }
}

struct Scratch {
    activations: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(sizes: &[usize]) -> Self {
        Scratch { activations: sizes.iter().map(|&s| vec![0.0; s]).collect() }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Central finite-difference gradient of [`ModelSpec::loss`], one coordinate
/// at a time. Used as an oracle for [`ModelSpec::gradient`].
pub fn fd_gradient(spec: &ModelSpec, params: &ParamVector, batch: &Batch, h: f64) -> Result<ParamVector> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for j in 0..params.len() {
        let orig = params[j];
        probe.as_mut_slice()[j] = orig + h;
        let plus = spec.loss(&probe, batch)?;
        probe.as_mut_slice()[j] = orig - h;
        let minus = spec.loss(&probe, batch)?;
        probe.as_mut_slice()[j] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    ParamVector::from_raw(out).ensure_finite("finite-difference gradient")
}
