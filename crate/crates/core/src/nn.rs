//! Dense feed-forward networks with optional label conditioning.
//!
//! Parameters live in one flat vector so that optimizers, clipping and noise
//! treat a network as a single point in `R^P`. The layout is:
//!
//! ```text
//! [ embedding table (num_classes x label_embed_dim) | W1 (out x in) | b1 | W2 | b2 | ... ]
//! ```
//!
//! A conditional network sees `[x, E[y]]`, the data row concatenated with the
//! embedding row of its label.
//!
//! Besides the plain forward pass this module provides the three gradients
//! GAN training needs: per-example discriminator gradients (materialized or
//! fused with clipping), and the mean generator gradient taken through a
//! frozen discriminator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, norm_sq, Matrix};

/// Sigmoid outputs are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with the given negative-side slope in `[0, 1)`.
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

/// Nonlinearity applied to the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Sigmoid,
    Tanh,
    Identity,
}

/// Architecture of one dense network.
///
/// `layer_sizes[0]` is the full input width, including the label embedding
/// for conditional networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// Number of label classes; 0 makes the network unconditional.
    pub num_classes: usize,
    pub label_embed_dim: usize,
    pub output_activation: OutputActivation,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("a network needs at least an input and an output layer"));
        }
        if let Some(i) = self.layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::config(format!("layer {i} has zero width")));
        }
        if self.num_classes > 0 {
            if self.label_embed_dim == 0 {
                return Err(Error::config("conditional network needs label_embed_dim > 0"));
            }
            if self.layer_sizes[0] <= self.label_embed_dim {
                return Err(Error::config(format!(
                    "input width {} leaves no room for data next to a {}-wide label embedding",
                    self.layer_sizes[0], self.label_embed_dim
                )));
            }
        } else if self.label_embed_dim != 0 {
            return Err(Error::config("unconditional network must have label_embed_dim = 0"));
        }
        if let Activation::LeakyRelu(s) = self.activation {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::config(format!("leaky relu slope {s} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn is_conditional(&self) -> bool {
        self.num_classes > 0
    }

    /// Width of the data part of the input (without the embedding).
    pub fn data_dim(&self) -> usize {
        self.layer_sizes[0] - self.label_embed_dim
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn embedding_len(&self) -> usize {
        self.num_classes * self.label_embed_dim
    }

    /// Weights + biases + embedding table.
    pub fn param_count(&self) -> usize {
        self.embedding_len() + self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>()
    }

    /// Offsets of each layer's weight block; its bias follows immediately.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut off = self.embedding_len();
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let o = off;
                off += w[0] * w[1] + w[1];
                o
            })
            .collect()
    }
}

/// A network's architecture together with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    spec: NetworkSpec,
    params: Vec<f64>,
}

impl ModelState {
    /// Wraps existing parameters, checking the count and finiteness.
    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::shape(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::numeric(None, format!("parameter {i} is not finite")));
        }
        Ok(ModelState { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access for optimizers; the length is fixed.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer(&self, offsets: &[usize], l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = (self.spec.layer_sizes[l], self.spec.layer_sizes[l + 1]);
        let o = offsets[l];
        (&self.params[o..o + fan_in * fan_out], &self.params[o + fan_in * fan_out..o + fan_in * fan_out + fan_out])
    }

    fn embedding_row(&self, label: usize) -> &[f64] {
        let e = self.spec.label_embed_dim;
        &self.params[label * e..(label + 1) * e]
    }
}

/// Initializes a network deterministically from `seed`.
///
/// Weights and biases of a layer are uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`;
/// the embedding table is uniform in `[-1, 1] / sqrt(label_embed_dim)`.
pub fn init_network(spec: NetworkSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(spec.param_count());
    if spec.is_conditional() {
        let scale = 1.0 / libm::sqrt(spec.label_embed_dim as f64);
        params.extend((0..spec.embedding_len()).map(|_| rng.random_range(-1.0..=1.0) * scale));
    }
    for w in spec.layer_sizes.windows(2) {
        let bound = 1.0 / libm::sqrt(w[0] as f64);
        params.extend((0..w[0] * w[1] + w[1]).map(|_| rng.random_range(-bound..=bound)));
    }
    debug_assert_eq!(params.len(), spec.param_count());
    Ok(ModelState { spec, params })
}

/// Network inputs: one row per example, plus labels for conditional networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::shape(format!("{} labels for {} rows", l.len(), inputs.rows())));
            }
        }
        Ok(Batch { inputs, labels })
    }

    pub fn unlabelled(inputs: Matrix) -> Self {
        Batch { inputs, labels: None }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Which discriminator log-loss an example contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `-log D(x, y)`, for real examples.
    Real,
    /// `-log(1 - D(x, y))`, for generated examples.
    Fake,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Loss and its derivative with respect to the logit, for the clamped sigmoid head.
#[inline]
fn logit_loss(kind: LossKind, logit: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let inside = (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    match kind {
        LossKind::Real => (-libm::log(pc), if inside { p - 1.0 } else { 0.0 }),
        LossKind::Fake => (-libm::log(1.0 - pc), if inside { p } else { 0.0 }),
    }
}

/// Per-example loss values of a discriminator output `p` (already a probability).
pub fn disc_loss(kind: LossKind, p: f64) -> f64 {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    match kind {
        LossKind::Real => -libm::log(pc),
        LossKind::Fake => -libm::log(1.0 - pc),
    }
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the (embedded) input; `acts[l]` the output of layer `l`.
    acts: Vec<Matrix>,
    /// Pre-activation of the last layer.
    logits: Matrix,
    labels: Option<Vec<usize>>,
}

impl Trace {
    pub fn outputs(&self) -> &Matrix {
        self.acts.last().expect("trace has at least the input")
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }
}

fn apply_activation(act: Activation, z: &mut [f64]) {
    match act {
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::LeakyRelu(s) => z.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v *= s
            }
        }),
        Activation::Tanh => z.iter_mut().for_each(|v| *v = libm::tanh(*v)),
        Activation::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
    }
}

/// Multiplies `delta` in place by the activation derivative, given the activation output.
fn mul_activation_grad(act: Activation, a: &[f64], delta: &mut [f64]) {
    match act {
        Activation::Relu => delta.iter_mut().zip(a).for_each(|(d, &a)| {
            if a <= 0.0 {
                *d = 0.0
            }
        }),
        Activation::LeakyRelu(s) => delta.iter_mut().zip(a).for_each(|(d, &a)| {
            if a <= 0.0 {
                *d *= s
            }
        }),
        Activation::Tanh => delta.iter_mut().zip(a).for_each(|(d, &a)| *d *= 1.0 - a * a),
        Activation::Sigmoid => delta.iter_mut().zip(a).for_each(|(d, &a)| *d *= a * (1.0 - a)),
    }
}

fn embed_inputs(model: &ModelState, batch: &Batch) -> Result<Matrix> {
    let spec = &model.spec;
    let data_dim = spec.data_dim();
    if batch.inputs.cols() != data_dim {
        return Err(Error::shape(format!(
            "batch has {} input columns, network expects {data_dim}",
            batch.inputs.cols()
        )));
    }
    if !spec.is_conditional() {
        return Ok(batch.inputs.clone());
    }
    let labels = batch.labels.as_ref().ok_or_else(|| Error::shape("conditional network needs labels"))?;
    let n = batch.len();
    let width = spec.layer_sizes[0];
    let mut a0 = Matrix::zeros(n, width);
    for i in 0..n {
        let y = labels[i];
        if y >= spec.num_classes {
            return Err(Error::shape(format!("label {y} at row {i} outside [0, {})", spec.num_classes)));
        }
        let row = a0.row_mut(i);
        row[..data_dim].copy_from_slice(batch.inputs.row(i));
        row[data_dim..].copy_from_slice(model.embedding_row(y));
    }
    Ok(a0)
}

/// Forward pass that keeps every layer's activations for backpropagation.
pub fn forward_trace(model: &ModelState, batch: &Batch) -> Result<Trace> {
    let spec = &model.spec;
    let offsets = spec.layer_offsets();
    let n = batch.len();
    let mut acts = Vec::with_capacity(spec.layer_sizes.len());
    acts.push(embed_inputs(model, batch)?);
    let mut logits = Matrix::zeros(0, 0);
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let (w, b) = model.layer(&offsets, l);
        let mut z = Matrix::zeros(n, fan_out);
        for i in 0..n {
            z.row_mut(i).copy_from_slice(b);
        }
        // z += a * W^T, with W stored out x in
        gemm(n, fan_in, fan_out, 1.0, acts[l].as_slice(), (fan_in, 1), w, (1, fan_in), 1.0, z.as_mut_slice(), (fan_out, 1));
        if l + 1 == spec.num_layers() {
            logits = z.clone();
            match spec.output_activation {
                OutputActivation::Sigmoid => apply_activation(Activation::Sigmoid, z.as_mut_slice()),
                OutputActivation::Tanh => apply_activation(Activation::Tanh, z.as_mut_slice()),
                OutputActivation::Identity => {}
            }
        } else {
            apply_activation(spec.activation, z.as_mut_slice());
        }
        acts.push(z);
    }
    Ok(Trace { acts, logits, labels: batch.labels.clone() })
}

/// Network outputs for a batch, one row per example.
pub fn forward(model: &ModelState, batch: &Batch) -> Result<Matrix> {
    let out = forward_trace(model, batch)?.acts.pop().expect("non-empty");
    if let Some(i) = out.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(Some(i / out.cols().max(1)), "non-finite network output"));
    }
    Ok(out)
}

/// Backpropagated errors: `layers[l]` is dL/dz for layer `l + 1`,
/// `input` is dL/d(input row) including the embedding columns.
struct Deltas {
    layers: Vec<Matrix>,
    input: Matrix,
}

/// Backpropagates `delta_out = dL/dz_L` through every layer.
fn backprop(model: &ModelState, trace: &Trace, delta_out: Matrix) -> Deltas {
    let spec = &model.spec;
    let offsets = spec.layer_offsets();
    let n = delta_out.rows();
    let layers_n = spec.num_layers();
    let mut layers: Vec<Matrix> = Vec::with_capacity(layers_n);
    layers.push(delta_out);
    let mut input = Matrix::zeros(0, 0);
    for l in (0..layers_n).rev() {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let (w, _) = model.layer(&offsets, l);
        let delta = layers.last().expect("pushed");
        let mut prev = Matrix::zeros(n, fan_in);
        gemm(n, fan_out, fan_in, 1.0, delta.as_slice(), (fan_out, 1), w, (fan_in, 1), 0.0, prev.as_mut_slice(), (fan_in, 1));
        if l == 0 {
            input = prev;
        } else {
            mul_activation_grad(spec.activation, trace.acts[l].as_slice(), prev.as_mut_slice());
            layers.push(prev);
        }
    }
    layers.reverse();
    Deltas { layers, input }
}

/// dL/dz_L from the discriminator loss kind, plus per-example losses.
fn disc_output_delta(model: &ModelState, trace: &Trace, kind: LossKind) -> Result<(Matrix, Vec<f64>)> {
    if model.spec.output_activation != OutputActivation::Sigmoid || model.spec.output_dim() != 1 {
        return Err(Error::config("discriminator losses need a single sigmoid output"));
    }
    let logits = trace.logits.as_slice();
    let mut delta = Matrix::zeros(logits.len(), 1);
    let mut losses = Vec::with_capacity(logits.len());
    for (i, &z) in logits.iter().enumerate() {
        let (loss, g) = logit_loss(kind, z);
        if !loss.is_finite() || !g.is_finite() {
            return Err(Error::numeric(Some(i), "non-finite discriminator loss"));
        }
        delta.as_mut_slice()[i] = g;
        losses.push(loss);
    }
    Ok((delta, losses))
}

/// Squared norm of each example's full gradient, computed from the deltas
/// without materializing the rows: for a dense layer `|d a^T|^2 = |d|^2 |a|^2`.
fn per_example_norms_sq(model: &ModelState, trace: &Trace, deltas: &Deltas) -> Vec<f64> {
    let spec = &model.spec;
    let n = deltas.input.rows();
    let data_dim = spec.data_dim();
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for (l, d) in deltas.layers.iter().enumerate() {
                s += norm_sq(d.row(i)) * (norm_sq(trace.acts[l].row(i)) + 1.0);
            }
            if spec.is_conditional() {
                s += norm_sq(&deltas.input.row(i)[data_dim..]);
            }
            s
        })
        .collect()
}

/// Adds `sum_i w_i * grad_i` into `out`, with `w_i = 1` when `weights` is `None`.
fn accumulate(model: &ModelState, trace: &Trace, deltas: &Deltas, weights: Option<&[f64]>, out: &mut [f64]) {
    let spec = &model.spec;
    let offsets = spec.layer_offsets();
    let n = deltas.input.rows();
    if n == 0 {
        return;
    }
    let scaled = |d: &Matrix| -> Option<Matrix> {
        weights.map(|w| {
            let mut m = d.clone();
            for (i, &wi) in w.iter().enumerate() {
                m.row_mut(i).iter_mut().for_each(|v| *v *= wi);
            }
            m
        })
    };
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let owned = scaled(&deltas.layers[l]);
        let delta = owned.as_ref().unwrap_or(&deltas.layers[l]);
        let o = offsets[l];
        let (gw, rest) = out[o..].split_at_mut(fan_in * fan_out);
        // gW += delta^T * a_prev   (out x n) * (n x in)
        gemm(fan_out, n, fan_in, 1.0, delta.as_slice(), (1, fan_out), trace.acts[l].as_slice(), (fan_in, 1), 1.0, gw, (fan_in, 1));
        let gb = &mut rest[..fan_out];
        for row in delta.iter_rows() {
            gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
    }
    if spec.is_conditional() {
        let labels = trace.labels.as_ref().expect("conditional trace keeps labels");
        let (e, data_dim) = (spec.label_embed_dim, spec.data_dim());
        for i in 0..n {
            let w = weights.map_or(1.0, |w| w[i]);
            let y = labels[i];
            let src = &deltas.input.row(i)[data_dim..];
            out[y * e..(y + 1) * e].iter_mut().zip(src).for_each(|(g, d)| *g += w * d);
        }
    }
}

/// Per-example gradients, one row per example, with their Euclidean norms.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGradMatrix {
    pub grads: Matrix,
    pub norms: Vec<f64>,
}

impl PerExampleGradMatrix {
    /// Builds the matrix from raw rows, computing norms.
    pub fn from_grads(grads: Matrix) -> Self {
        let norms = grads.iter_rows().map(crate::linalg::norm).collect();
        PerExampleGradMatrix { grads, norms }
    }

    pub fn len(&self) -> usize {
        self.grads.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.rows() == 0
    }

    /// Column sums.
    pub fn sum_rows(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.grads.cols()];
        for r in self.grads.iter_rows() {
            s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        s
    }
}

/// Gradient of the loss on each example alone, with respect to every parameter.
///
/// Embedding-table entries for labels that an example does not carry are zero
/// in that example's row.
pub fn backward_per_example(model: &ModelState, batch: &Batch, loss: LossKind) -> Result<PerExampleGradMatrix> {
    let trace = forward_trace(model, batch)?;
    let (delta_out, _) = disc_output_delta(model, &trace, loss)?;
    let deltas = backprop(model, &trace, delta_out);
    let spec = &model.spec;
    let offsets = spec.layer_offsets();
    let n = batch.len();
    let p = spec.param_count();
    let mut grads = Matrix::zeros(n, p);
    for i in 0..n {
        let row = grads.row_mut(i);
        for l in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            let d = deltas.layers[l].row(i);
            let a = trace.acts[l].row(i);
            let o = offsets[l];
            for (j, &dj) in d.iter().enumerate() {
                let w_row = &mut row[o + j * fan_in..o + (j + 1) * fan_in];
                w_row.iter_mut().zip(a).for_each(|(g, &ak)| *g = dj * ak);
            }
            row[o + fan_in * fan_out..o + fan_in * fan_out + fan_out].copy_from_slice(d);
        }
        if spec.is_conditional() {
            let y = trace.labels.as_ref().expect("conditional")[i];
            let e = spec.label_embed_dim;
            row[y * e..(y + 1) * e].copy_from_slice(&deltas.input.row(i)[spec.data_dim()..]);
        }
    }
    let out = PerExampleGradMatrix::from_grads(grads);
    if let Some(i) = out.norms.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(Some(i), "non-finite per-example gradient"));
    }
    Ok(out)
}

/// Summed (not averaged) gradient of the batch loss, via ordinary batched backprop.
pub fn backward_sum(model: &ModelState, batch: &Batch, loss: LossKind) -> Result<Vec<f64>> {
    let trace = forward_trace(model, batch)?;
    let (delta_out, _) = disc_output_delta(model, &trace, loss)?;
    let deltas = backprop(model, &trace, delta_out);
    let mut g = vec![0.0; model.param_count()];
    accumulate(model, &trace, &deltas, None, &mut g);
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(None, format!("non-finite gradient coordinate {i}")));
    }
    Ok(g)
}

/// Result of [`clipped_grad_sum`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedSum {
    /// `sum_i min(1, C / |g_i|) g_i`.
    pub sum: Vec<f64>,
    /// Unclipped per-example norms.
    pub norms: Vec<f64>,
    /// Sum of per-example losses.
    pub loss_sum: f64,
}

/// Sum of per-example clipped gradients without materializing the rows.
///
/// Equivalent to `clip_per_example(backward_per_example(..), clip).sum_rows()`:
/// each example's gradient is linear in its output delta, so scaling that
/// delta by the clip factor scales the whole row. `clip = f64::INFINITY`
/// disables clipping.
pub fn clipped_grad_sum(model: &ModelState, batch: &Batch, loss: LossKind, clip: f64) -> Result<ClippedSum> {
    let trace = forward_trace(model, batch)?;
    let (delta_out, losses) = disc_output_delta(model, &trace, loss)?;
    let deltas = backprop(model, &trace, delta_out);
    let norms: Vec<f64> = per_example_norms_sq(model, &trace, &deltas).into_iter().map(libm::sqrt).collect();
    if let Some(i) = norms.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(Some(i), "non-finite per-example gradient"));
    }
    let factors: Vec<f64> = norms.iter().map(|&nrm| crate::dp::clip_factor(nrm, clip)).collect();
    let mut sum = vec![0.0; model.param_count()];
    let weights = if factors.iter().all(|&f| f == 1.0) { None } else { Some(factors.as_slice()) };
    accumulate(model, &trace, &deltas, weights, &mut sum);
    Ok(ClippedSum { sum, norms, loss_sum: losses.iter().sum() })
}

/// Mean generator gradient under the non-saturating loss, plus what the
/// discriminator said about the generated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorGrad {
    /// `(1/B) sum_i grad_theta(-log D(G(z_i, y_i), y_i))`.
    pub grad: Vec<f64>,
    pub mean_loss: f64,
    /// `D(G(z_i, y_i), y_i)` for each example.
    pub disc_outputs: Vec<f64>,
}

/// Mean non-saturating generator gradient through a frozen discriminator.
///
/// `noise_batch` holds latent vectors and, for conditional models, the labels
/// fed to both networks.
pub fn backward_mean(model_g: &ModelState, model_d: &ModelState, noise_batch: &Batch) -> Result<GeneratorGrad> {
    if model_g.spec.output_dim() != model_d.spec.data_dim() {
        return Err(Error::shape(format!(
            "generator emits {} columns, discriminator reads {}",
            model_g.spec.output_dim(),
            model_d.spec.data_dim()
        )));
    }
    let n = noise_batch.len();
    let g_trace = forward_trace(model_g, noise_batch)?;
    let fake = Batch { inputs: g_trace.outputs().clone(), labels: noise_batch.labels.clone() };
    let d_trace = forward_trace(model_d, &fake)?;
    let (mut delta_out, losses) = disc_output_delta(model_d, &d_trace, LossKind::Real)?;
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    delta_out.as_mut_slice().iter_mut().for_each(|v| *v *= inv_n);
    let d_deltas = backprop(model_d, &d_trace, delta_out);

    // dL/dx for the generated rows, then through the generator head.
    let out_dim = model_g.spec.output_dim();
    let mut g_delta = Matrix::zeros(n, out_dim);
    let x = g_trace.outputs();
    for i in 0..n {
        let src = &d_deltas.input.row(i)[..out_dim];
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(Some(i), "non-finite gradient at generator output"));
        }
        let dst = g_delta.row_mut(i);
        dst.copy_from_slice(src);
        match model_g.spec.output_activation {
            OutputActivation::Tanh => mul_activation_grad(Activation::Tanh, x.row(i), dst),
            OutputActivation::Sigmoid => mul_activation_grad(Activation::Sigmoid, x.row(i), dst),
            OutputActivation::Identity => {}
        }
    }
    let deltas = backprop(model_g, &g_trace, g_delta);
    let mut grad = vec![0.0; model_g.param_count()];
    accumulate(model_g, &g_trace, &deltas, None, &mut grad);
    if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(None, format!("non-finite generator gradient coordinate {i}")));
    }
    Ok(GeneratorGrad {
        grad,
        mean_loss: losses.iter().sum::<f64>() * inv_n,
        disc_outputs: d_trace.outputs().as_slice().to_vec(),
    })
}

/// Mean softmax cross-entropy and its gradient for an identity-head classifier.
pub fn softmax_xent_grad(model: &ModelState, batch: &Batch, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    if model.spec.output_activation != OutputActivation::Identity {
        return Err(Error::config("classifier needs an identity output head"));
    }
    if targets.len() != batch.len() {
        return Err(Error::shape("one target per row required"));
    }
    let n = batch.len();
    let k = model.spec.output_dim();
    let trace = forward_trace(model, batch)?;
    let mut delta = Matrix::zeros(n, k);
    let mut loss = 0.0;
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    for i in 0..n {
        let z = trace.logits.row(i);
        let t = targets[i];
        if t >= k {
            return Err(Error::shape(format!("target {t} outside [0, {k})")));
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + libm::log(z.iter().map(|v| libm::exp(v - m)).sum::<f64>());
        loss += lse - z[t];
        let d = delta.row_mut(i);
        for j in 0..k {
            d[j] = (libm::exp(z[j] - lse) - if j == t { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    let deltas = backprop(model, &trace, delta);
    let mut grad = vec![0.0; model.param_count()];
    accumulate(model, &trace, &deltas, None, &mut grad);
    if !loss.is_finite() {
        return Err(Error::numeric(None, "non-finite classifier loss"));
    }
    Ok((loss * inv_n, grad))
}
