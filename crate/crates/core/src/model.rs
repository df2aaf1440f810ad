//! Small differentiable classifiers with hand-written backpropagation.
//!
//! Two architectures are supported: multinomial logistic regression and a
//! one-hidden-layer MLP. Both are trained with mean cross-entropy so the
//! local learning rate does not depend on the batch size.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::param::{LayerLayout, ParamVector, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

fn default_hidden() -> usize {
    32
}

fn default_head_layers() -> usize {
    1
}

/// Architecture description; determines the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Number of trailing affine layers that make up the head slice.
    #[serde(default = "default_head_layers")]
    pub head_layers: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_dim: 0,
            num_classes,
            activation: Activation::Relu,
            head_layers: 1,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            num_classes,
            activation,
            head_layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be at least 2"));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be at least 1 for mlp"));
        }
        if self.head_layers == 0 {
            return Err(Error::config("model.head_layers", "must be at least 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.kind {
            ModelKind::Logistic => c * d + c,
            ModelKind::Mlp => h * d + h + c * h + c,
        }
    }

    /// Layout with one block per weight matrix and bias. The head spans the
    /// last `head_layers` affine layers (weights and bias each).
    pub fn layout(&self) -> Arc<LayerLayout> {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        let blocks: Vec<(&str, usize, usize, usize)> = match self.kind {
            ModelKind::Logistic => vec![("output.weight", c * d, d, c), ("output.bias", c, d, c)],
            ModelKind::Mlp => vec![
                ("hidden.weight", h * d, d, h),
                ("hidden.bias", h, d, h),
                ("output.weight", c * h, h, c),
                ("output.bias", c, h, c),
            ],
        };
        let layout = LayerLayout::sequential(&blocks, 2 * self.head_layers)
            .expect("sequential layout is contiguous by construction");
        Arc::new(layout)
    }
}

/// Features (row-major, `len × input_dim`) and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset("batch has no rows".into()));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::InvalidArgument(format!(
                "batch has {} feature values for {} rows of width {}",
                features.len(),
                labels.len(),
                input_dim
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("batch features must be finite".into()));
        }
        Ok(Self {
            features,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Local optimizer settings shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Minibatch size; values at or above the client's sample count give
    /// full-batch steps.
    pub batch_size: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 2,
            batch_size: 64,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{prefix}.lr"), "must be positive and finite"));
        }
        if self.epochs == 0 {
            return Err(Error::config(format!("{prefix}.epochs"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{prefix}.batch_size"), "must be at least 1"));
        }
        Ok(())
    }
}

fn check_inputs(spec: &ModelSpec, theta: &ParamVector, batch: &Batch) -> Result<()> {
    if theta.len() != spec.param_count() {
        return Err(Error::LayoutMismatch(format!(
            "model expects {} parameters, got {}",
            spec.param_count(),
            theta.len()
        )));
    }
    if batch.input_dim != spec.input_dim {
        return Err(Error::InvalidArgument(format!(
            "batch width {} does not match model input_dim {}",
            batch.input_dim, spec.input_dim
        )));
    }
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: spec.num_classes,
        });
    }
    Ok(())
}

/// Writes softmax(z) into `z` and returns log-sum-exp.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn affine(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &weight[r * cols..(r + 1) * cols];
        let mut acc = bias[r];
        for (w, xv) in row.iter().zip(x) {
            acc += w * xv;
        }
        *o = acc;
    }
}

/// Mean cross-entropy, logits and (optionally) the gradient.
fn evaluate(
    spec: &ModelSpec,
    theta: &[f64],
    batch: &Batch,
    mut grad: Option<&mut [f64]>,
) -> (f64, Vec<f64>) {
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut logits = vec![0.0; n * c];
    let mut probs = vec![0.0; c];
    let mut loss = 0.0;

    match spec.kind {
        ModelKind::Logistic => {
            let (w, b) = theta.split_at(c * d);
            for i in 0..n {
                let x = batch.row(i);
                let z = &mut logits[i * c..(i + 1) * c];
                affine(w, b, x, z);
                probs.copy_from_slice(z);
                let lse = softmax_in_place(&mut probs);
                let y = batch.labels[i];
                loss += lse - z[y];
                if let Some(g) = grad.as_deref_mut() {
                    probs[y] -= 1.0;
                    let (gw, gb) = g.split_at_mut(c * d);
                    for k in 0..c {
                        let dz = probs[k] * inv_n;
                        gb[k] += dz;
                        for (gv, xv) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                            *gv += dz * xv;
                        }
                    }
                }
            }
        }
        ModelKind::Mlp => {
            let (w1, rest) = theta.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            let mut pre = vec![0.0; h];
            let mut act = vec![0.0; h];
            let mut dh = vec![0.0; h];
            for i in 0..n {
                let x = batch.row(i);
                affine(w1, b1, x, &mut pre);
                for (a, &p) in act.iter_mut().zip(&pre) {
                    *a = spec.activation.apply(p);
                }
                let z = &mut logits[i * c..(i + 1) * c];
                affine(w2, b2, &act, z);
                probs.copy_from_slice(z);
                let lse = softmax_in_place(&mut probs);
                let y = batch.labels[i];
                loss += lse - z[y];
                if let Some(g) = grad.as_deref_mut() {
                    probs[y] -= 1.0;
                    let (gw1, rest) = g.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    dh.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        let dz = probs[k] * inv_n;
                        gb2[k] += dz;
                        let w2_row = &w2[k * h..(k + 1) * h];
                        for j in 0..h {
                            gw2[k * h + j] += dz * act[j];
                            dh[j] += dz * w2_row[j];
                        }
                    }
                    for j in 0..h {
                        let dpre = dh[j] * spec.activation.derivative(pre[j], act[j]);
                        if dpre == 0.0 {
                            continue;
                        }
                        gb1[j] += dpre;
                        for (gv, xv) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *gv += dpre * xv;
                        }
                    }
                }
            }
        }
    }
    (loss * inv_n, logits)
}

/// Mean cross-entropy loss and the `len × num_classes` logits.
pub fn forward(spec: &ModelSpec, theta: &ParamVector, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    check_inputs(spec, theta, batch)?;
    Ok(evaluate(spec, theta.as_slice(), batch, None))
}

/// Gradient of the mean cross-entropy with respect to `theta`.
pub fn grad(spec: &ModelSpec, theta: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    loss_and_grad(spec, theta, batch).map(|(_, g)| g)
}

pub fn loss_and_grad(spec: &ModelSpec, theta: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    check_inputs(spec, theta, batch)?;
    let mut g = theta.zeros_like();
    let (loss, _) = evaluate(spec, theta.as_slice(), batch, Some(g.as_mut_slice()));
    Ok((loss, g))
}

/// Mean cross-entropy and accuracy of precomputed logits.
pub fn score_logits(logits: &[f64], labels: &[usize], num_classes: usize) -> (f64, f64) {
    let n = labels.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut probs = vec![0.0; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        let z = &logits[i * num_classes..(i + 1) * num_classes];
        probs.copy_from_slice(z);
        loss += softmax_in_place(&mut probs) - z[y];
        if argmax(z) == y {
            correct += 1;
        }
    }
    (loss / n as f64, correct as f64 / n as f64)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Local minibatch SGD on the client's train split.
///
/// Returns the trained parameters and the update `theta_t - theta0`. Each
/// epoch reshuffles the train indices with `rng`; the final partial batch is
/// kept.
pub fn local_sgd(
    spec: &ModelSpec,
    theta0: &ParamVector,
    data: &ClientDataset,
    cfg: &LocalConfig,
    rng: &mut SeededRng,
) -> Result<(ParamVector, ParamVector)> {
    cfg.validate("local")?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("client has no training samples".into()));
    }
    let mut theta = theta0.clone();
    let mut order = data.train.clone();
    let batch_size = cfg.batch_size.min(order.len());
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch = data.batch(chunk)?;
            let g = grad(spec, &theta, &batch)?;
            theta.add_scaled(-cfg.lr, &g)?;
        }
    }
    let delta = theta.sub(theta0)?;
    Ok((theta, delta))
}
