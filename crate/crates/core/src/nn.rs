//! Dense feedforward classifier: forward passes, cross-entropy, gradients at
//! the current weights, and plain minibatch SGD.
//!
//! Every dense weight matrix is prunable. Prunable entries are addressed by a
//! flat global index: tensors are laid out in layer order, each row-major.
//! Biases are never addressed and never pruned.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, Stream};

/// One dense layer, `y = act(x Wᵀ + b)` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>, relu: bool) -> Self {
        assert_eq!(weight.rows(), bias.len(), "bias length must equal out_dim");
        Self { weight, bias, relu }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Location of a prunable weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WeightIndex {
    pub tensor: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Self {
        assert_eq!(features.rows(), labels.len(), "one label per row");
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Matrix,
    /// Per tensor, the batch mean of the squared input feeding each column.
    pub activations: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    original: Vec<Matrix>,
    offsets: Vec<usize>,
}

impl Mlp {
    /// Fresh network with `dims = [in, hidden.., out]`, ReLU on every hidden
    /// layer. Weights and biases are drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn new(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let mut rng = rng::stream(seed, Stream::Init);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let bias = (0..fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Dense::new(Matrix::from_vec(fan_out, fan_in, weight), bias, l != last)
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Wraps explicit layers; the current weights become the original ones.
    pub fn from_layers(layers: Vec<Dense>) -> Self {
        for pair in layers.windows(2) {
            assert_eq!(pair[0].out_dim(), pair[1].in_dim(), "layer widths do not chain");
        }
        let original = layers.iter().map(|l| l.weight.clone()).collect();
        Self::with_original(layers, original)
    }

    /// Current layers plus a separate snapshot of the original weights.
    pub fn with_original(layers: Vec<Dense>, original: Vec<Matrix>) -> Self {
        assert_eq!(layers.len(), original.len());
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for (l, o) in layers.iter().zip(&original) {
            assert_eq!((l.weight.rows(), l.weight.cols()), (o.rows(), o.cols()));
            acc += l.weight.rows() * l.weight.cols();
            offsets.push(acc);
        }
        Self {
            layers,
            original,
            offsets,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn original_weights(&self) -> &[Matrix] {
        &self.original
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim()];
        d.extend(self.layers.iter().map(Dense::out_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    pub fn num_tensors(&self) -> usize {
        self.layers.len()
    }

    /// Total number of prunable weights, N.
    pub fn num_weights(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn tensor_range(&self, tensor: usize) -> Range<usize> {
        self.offsets[tensor]..self.offsets[tensor + 1]
    }

    pub fn tensor_of(&self, index: usize) -> usize {
        debug_assert!(index < self.num_weights());
        self.offsets.partition_point(|&o| o <= index) - 1
    }

    pub fn locate(&self, index: usize) -> WeightIndex {
        let tensor = self.tensor_of(index);
        let local = index - self.offsets[tensor];
        let cols = self.layers[tensor].in_dim();
        WeightIndex {
            tensor,
            row: local / cols,
            col: local % cols,
        }
    }

    pub fn global_index(&self, at: WeightIndex) -> usize {
        self.offsets[at.tensor] + at.row * self.layers[at.tensor].in_dim() + at.col
    }

    pub fn weight(&self, index: usize) -> f64 {
        let at = self.locate(index);
        self.layers[at.tensor].weight[(at.row, at.col)]
    }

    pub fn original(&self, index: usize) -> f64 {
        let at = self.locate(index);
        self.original[at.tensor][(at.row, at.col)]
    }

    pub fn set_weight(&mut self, index: usize, value: f64) {
        let at = self.locate(index);
        self.layers[at.tensor].weight[(at.row, at.col)] = value;
    }

    pub fn current_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().copied())
            .collect()
    }

    pub fn original_flat(&self) -> Vec<f64> {
        self.original
            .iter()
            .flat_map(|w| w.as_slice().iter().copied())
            .collect()
    }

    /// Takes the current weights as the new original weights.
    pub fn snapshot_original(&mut self) {
        self.original = self.layers.iter().map(|l| l.weight.clone()).collect();
    }

    fn check_width(&self, batch: &Batch) -> Result<()> {
        let expected = self.input_dim();
        if batch.features.cols() != expected {
            return Err(Error::InputShape {
                expected,
                got: batch.features.cols(),
            });
        }
        Ok(())
    }

    /// Inputs to every layer plus the final logits.
    fn forward_inputs(&self, features: &Matrix) -> (Vec<Matrix>, Matrix) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = features.clone();
        for layer in &self.layers {
            let z = apply_layer(layer, &x);
            inputs.push(x);
            x = z;
        }
        (inputs, x)
    }

    pub fn forward(&self, batch: &Batch, capture: bool) -> Result<Forward> {
        self.check_width(batch)?;
        if !capture {
            let mut x = batch.features.clone();
            for layer in &self.layers {
                x = apply_layer(layer, &x);
            }
            return Ok(Forward {
                logits: x,
                activations: None,
            });
        }
        let (inputs, logits) = self.forward_inputs(&batch.features);
        let activations = inputs.iter().map(mean_square_columns).collect();
        Ok(Forward {
            logits,
            activations: Some(activations),
        })
    }

    /// Forward and backward pass keeping everything needed for gradients of
    /// any weight subset.
    pub fn trace(&self, batch: &Batch) -> Result<Trace> {
        self.check_width(batch)?;
        let (inputs, logits) = self.forward_inputs(&batch.features);
        let m = batch.len();
        let mut delta = Matrix::zeros(m, logits.cols());
        for s in 0..m {
            let z = logits.row(s);
            let lse = log_sum_exp(z);
            let d = delta.row_mut(s);
            for (c, v) in d.iter_mut().enumerate() {
                *v = (z[c] - lse).exp();
            }
            d[batch.labels[s]] -= 1.0;
        }
        let mut deltas = vec![Matrix::zeros(0, 0); self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            if l > 0 {
                let mut prev = delta.matmul(&self.layers[l].weight);
                let act = &inputs[l];
                for (g, a) in prev.as_mut_slice().iter_mut().zip(act.as_slice()) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
                deltas[l] = std::mem::replace(&mut delta, prev);
            } else {
                deltas[0] = std::mem::replace(&mut delta, Matrix::zeros(0, 0));
            }
        }
        Ok(Trace {
            inputs,
            deltas,
            logits,
            labels: batch.labels.clone(),
            offsets: self.offsets.clone(),
        })
    }

    /// ∂(mean loss)/∂w at the current weights, for each requested index.
    pub fn grad_mean(&self, batch: &Batch, indices: &[usize]) -> Result<Vec<f64>> {
        Ok(self.trace(batch)?.grad_mean(indices))
    }

    /// Per-sample gradients, `m × indices.len()`.
    pub fn grad_per_sample(&self, batch: &Batch, indices: &[usize]) -> Result<Matrix> {
        Ok(self.trace(batch)?.per_sample(indices))
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let f = self.forward(batch, false)?;
        Ok((0..f.logits.rows()).map(|r| argmax(f.logits.row(r))).collect())
    }

    /// Mean loss and top-1 accuracy over the whole dataset. Per-sample terms
    /// are summed in dataset order, so the result does not depend on
    /// `eval_batch_size`.
    pub fn evaluate(&self, data: &Dataset, eval_batch_size: usize) -> Result<(f64, f64)> {
        let n = data.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let step = eval_batch_size.max(1);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + step).min(n);
            let batch = data.range_batch(start, end);
            let f = self.forward(&batch, false)?;
            for s in 0..batch.len() {
                let z = f.logits.row(s);
                loss_sum += log_sum_exp(z) - z[batch.labels[s]];
                if argmax(z) == batch.labels[s] {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok((loss_sum / n as f64, correct as f64 / n as f64))
    }

    /// Minibatch SGD over full data passes. The original weights are
    /// re-snapshotted when training finishes.
    pub fn train_sgd(&mut self, train: &Dataset, opts: &TrainOptions) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = rng::stream(opts.seed, Stream::Train);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut losses = Vec::with_capacity(opts.epochs);
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for epoch in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(opts.batch_size.max(1)) {
                let batch = train.batch(chunk);
                let trace = self.trace(&batch)?;
                loss_sum += trace.loss_sum();
                if opts.lr != 0.0 {
                    self.sgd_update(&trace, opts.lr);
                }
            }
            let epoch_loss = loss_sum / train.len() as f64;
            if !epoch_loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            losses.push(epoch_loss);
            if let Some(p) = opts.plateau {
                if epoch_loss < best * (1.0 - p.rel_tol) {
                    best = epoch_loss;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= p.patience {
                        break;
                    }
                }
            }
        }
        self.snapshot_original();
        Ok(TrainReport {
            epochs_run: losses.len(),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            epoch_losses: losses,
        })
    }

    fn sgd_update(&mut self, trace: &Trace, lr: f64) {
        let m = trace.batch_len() as f64;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let g = trace.layer_grad(l);
            for (w, d) in layer.weight.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *w -= lr * d;
            }
            let deltas = &trace.deltas[l];
            for (o, b) in layer.bias.iter_mut().enumerate() {
                let mut s = 0.0;
                for r in 0..deltas.rows() {
                    s += deltas[(r, o)];
                }
                *b -= lr * s / m;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub patience: usize,
    pub rel_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop early once the epoch loss fails to improve by `rel_tol` for
    /// `patience` consecutive epochs.
    pub plateau: Option<Plateau>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Per-layer inputs and per-sample output deltas of one batch.
///
/// `deltas[l][(s, o)]` is ∂ℓ_s/∂z_o for layer `l`, where ℓ_s is the loss of
/// sample `s` alone. Weight gradients follow as outer products with the
/// layer inputs.
#[derive(Clone, Debug)]
pub struct Trace {
    inputs: Vec<Matrix>,
    deltas: Vec<Matrix>,
    logits: Matrix,
    labels: Vec<usize>,
    offsets: Vec<usize>,
}

impl Trace {
    pub fn batch_len(&self) -> usize {
        self.labels.len()
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn input(&self, tensor: usize) -> &Matrix {
        &self.inputs[tensor]
    }

    pub fn loss_sum(&self) -> f64 {
        (0..self.logits.rows())
            .map(|s| {
                let z = self.logits.row(s);
                log_sum_exp(z) - z[self.labels[s]]
            })
            .sum()
    }

    pub fn loss(&self) -> f64 {
        self.loss_sum() / self.batch_len() as f64
    }

    /// Mean gradient of one whole tensor, `out × in`.
    pub fn layer_grad(&self, tensor: usize) -> Matrix {
        let m = self.batch_len() as f64;
        self.deltas[tensor].t_matmul(&self.inputs[tensor], 1.0 / m)
    }

    /// Batch mean of the squared inputs feeding each column of `tensor`.
    pub fn activation_stats(&self, tensor: usize) -> Vec<f64> {
        mean_square_columns(&self.inputs[tensor])
    }

    fn locate(&self, index: usize) -> WeightIndex {
        let tensor = self.offsets.partition_point(|&o| o <= index) - 1;
        let local = index - self.offsets[tensor];
        let cols = self.inputs[tensor].cols();
        WeightIndex {
            tensor,
            row: local / cols,
            col: local % cols,
        }
    }

    pub fn per_sample(&self, indices: &[usize]) -> Matrix {
        let m = self.batch_len();
        let locs: Vec<WeightIndex> = indices.iter().map(|&i| self.locate(i)).collect();
        let mut a = Matrix::zeros(m, indices.len());
        for s in 0..m {
            let row = a.row_mut(s);
            for (j, at) in locs.iter().enumerate() {
                row[j] = self.deltas[at.tensor][(s, at.row)] * self.inputs[at.tensor][(s, at.col)];
            }
        }
        a
    }

    pub fn grad_mean(&self, indices: &[usize]) -> Vec<f64> {
        let m = self.batch_len() as f64;
        indices
            .iter()
            .map(|&i| {
                let at = self.locate(i);
                let d = &self.deltas[at.tensor];
                let x = &self.inputs[at.tensor];
                let mut s = 0.0;
                for r in 0..d.rows() {
                    s += d[(r, at.row)] * x[(r, at.col)];
                }
                s / m
            })
            .collect()
    }
}

fn apply_layer(layer: &Dense, x: &Matrix) -> Matrix {
    let mut z = x.matmul_t(&layer.weight);
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
            if layer.relu && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    z
}

fn mean_square_columns(x: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (a, v) in acc.iter_mut().zip(x.row(r)) {
            *a += v * v;
        }
    }
    let m = x.rows().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    acc
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn loss(logits: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows(), labels.len());
    let total: f64 = (0..logits.rows())
        .map(|s| {
            let z = logits.row(s);
            log_sum_exp(z) - z[labels[s]]
        })
        .sum();
    total / labels.len() as f64
}
