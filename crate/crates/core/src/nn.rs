//! Dense feedforward network: affine layers with ReLU between them and a
//! softmax cross-entropy loss on the final logits.
//!
//! Parameters flatten layer by layer, each layer as its weight matrix in
//! row-major (`out × in`) order followed by its bias. Per-example gradients
//! use the same layout, so clipping can address one layer as a contiguous
//! slice.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::container::{self, ContainerError};

const CHECKPOINT_MAGIC: &[u8; 4] = b"DPNN";

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite parameter or input")]
    NonFinite,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(NnError::ShapeMismatch(format!(
                "layer {inputs}->{outputs} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite);
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Network parameters `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::ShapeMismatch("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(NnError::ShapeMismatch(format!(
                    "layer output {} does not feed next input {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::ShapeMismatch(format!("invalid layer dimensions {dims:?}")));
        }
        Ok(())
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|d| DenseLayer::new(d[0], d[1], vec![0.0; d[0] * d[1]], vec![0.0; d[1]]))
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    /// Weights uniform in `±√(6/(in+out))`, biases zero.
    pub fn glorot(dims: &[usize], seed: u64) -> Result<Self> {
        Self::check_dims(dims)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|d| {
                let limit = (6.0 / (d[0] + d[1]) as f64).sqrt();
                let weights = (0..d[0] * d[1]).map(|_| rng.random_range(-limit..limit)).collect();
                DenseLayer::new(d[0], d[1], weights, vec![0.0; d[1]])
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// `[in, hidden…, out]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    /// Flat parameter count per layer (weights plus bias).
    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(DenseLayer::param_count).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(dims: &[usize], flat: &[f64]) -> Result<Self> {
        Self::check_dims(dims)?;
        let expected: usize = dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum();
        if flat.len() != expected {
            return Err(NnError::ShapeMismatch(format!(
                "expected {expected} parameters, got {}",
                flat.len()
            )));
        }
        let mut rest = flat;
        let layers = dims
            .windows(2)
            .map(|d| {
                let (w, tail) = rest.split_at(d[0] * d[1]);
                let (b, tail) = tail.split_at(d[1]);
                rest = tail;
                DenseLayer::new(d[0], d[1], w.to_vec(), b.to_vec())
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    /// `θ ← θ − lr · direction`.
    pub fn descend(&mut self, direction: &[f64], lr: f64) -> Result<()> {
        if direction.len() != self.num_params() {
            return Err(NnError::ShapeMismatch(format!(
                "update has {} entries, model has {}",
                direction.len(),
                self.num_params()
            )));
        }
        let params = self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()));
        for (p, d) in params.zip(direction) {
            *p -= lr * d;
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let dims: Vec<u32> = self.dims().iter().map(|&d| d as u32).collect();
        container::write_header(w, CHECKPOINT_MAGIC, &dims)?;
        container::write_f64s(w, &self.flatten())?;
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let dims: Vec<usize> = container::read_header(r, CHECKPOINT_MAGIC)?
            .into_iter()
            .map(|d| d as usize)
            .collect();
        Self::check_dims(&dims)?;
        let n: usize = dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum();
        let flat = container::read_f64s(r, n)?;
        Self::from_flat(&dims, &flat)
    }
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l]` feeds layer `l`.
    pub activations: Vec<Vec<f64>>,
    /// Affine outputs of every layer; the last entry is the logits.
    pub pre_activations: Vec<Vec<f64>>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
    if x.len() != params.input_dim() {
        return Err(NnError::ShapeMismatch(format!(
            "input has {} features, network expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let n = params.layers.len();
    let mut activations = Vec::with_capacity(n);
    let mut pre_activations = Vec::with_capacity(n);
    let mut current = x.to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = layer.affine(&current);
        let next = if i + 1 < n { relu(&z) } else { z.clone() };
        activations.push(current);
        pre_activations.push(z);
        current = next;
    }
    Ok((current, ForwardTrace { activations, pre_activations }))
}

pub fn logits(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    forward(params, x).map(|(l, _)| l)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−ln softmax(logits)[label]`.
pub fn loss(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    (lse - logits[label]).max(0.0)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn check_label(params: &MlpParams, label: usize) -> Result<()> {
    let classes = params.num_classes();
    if label >= classes {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Gradient of `loss(forward(x), label)` with respect to every parameter,
/// in the flat layout.
pub fn example_gradient(params: &MlpParams, example: &LabeledExample) -> Result<Vec<f64>> {
    check_label(params, example.label)?;
    let (logits, trace) = forward(params, &example.features)?;
    let mut delta = softmax(&logits);
    delta[example.label] -= 1.0;

    let counts = params.layer_param_counts();
    let mut grad = vec![0.0; params.num_params()];
    let mut offset = grad.len();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        offset -= counts[l];
        let (gw, gb) = grad[offset..offset + counts[l]].split_at_mut(layer.weights.len());
        let input = &trace.activations[l];
        // outer product δ ⊗ a
        for (row, &d) in gw.chunks_exact_mut(layer.inputs).zip(&delta) {
            for (g, &a) in row.iter_mut().zip(input) {
                *g = d * a;
            }
        }
        gb.copy_from_slice(&delta);
        if l > 0 {
            let below = &trace.pre_activations[l - 1];
            let mut next = vec![0.0; layer.inputs];
            for (row, &d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                for (n, &w) in next.iter_mut().zip(row) {
                    *n += w * d;
                }
            }
            for (n, &z) in next.iter_mut().zip(below) {
                if z <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }
    Ok(grad)
}

/// One flat gradient per example, in batch order.
pub fn per_example_gradients(params: &MlpParams, batch: &[LabeledExample]) -> Result<Vec<Vec<f64>>> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    batch.par_iter().map(|ex| example_gradient(params, ex)).collect()
}

/// Mean gradient over the batch from a single whole-batch backward pass
/// (batch matrices rather than per-example outer products).
pub fn batch_mean_gradient(params: &MlpParams, batch: &[LabeledExample]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let b = batch.len();
    let n_layers = params.layers.len();
    let mut acts: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_layers);
    let mut pres: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_layers);
    let mut current: Vec<Vec<f64>> = Vec::with_capacity(b);
    for ex in batch {
        check_label(params, ex.label)?;
        if ex.features.len() != params.input_dim() {
            return Err(NnError::ShapeMismatch("batch example has wrong feature count".into()));
        }
        current.push(ex.features.clone());
    }
    for (i, layer) in params.layers.iter().enumerate() {
        let z: Vec<Vec<f64>> = current.iter().map(|a| layer.affine(a)).collect();
        let next = if i + 1 < n_layers { z.iter().map(|v| relu(v)).collect() } else { z.clone() };
        acts.push(current);
        pres.push(z);
        current = next;
    }
    // Δ for the output layer, averaged over the batch.
    let mut deltas: Vec<Vec<f64>> = current
        .iter()
        .zip(batch)
        .map(|(lg, ex)| {
            let mut d = softmax(lg);
            d[ex.label] -= 1.0;
            d.iter_mut().for_each(|v| *v /= b as f64);
            d
        })
        .collect();

    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    for l in (0..n_layers).rev() {
        let layer = &params.layers[l];
        // dW = Δᵀ A, column by column over the batch
        let mut gw = vec![0.0; layer.weights.len()];
        let mut gb = vec![0.0; layer.outputs];
        for o in 0..layer.outputs {
            for k in 0..layer.inputs {
                gw[o * layer.inputs + k] = (0..b).map(|s| deltas[s][o] * acts[l][s][k]).sum();
            }
            gb[o] = (0..b).map(|s| deltas[s][o]).sum();
        }
        if l > 0 {
            deltas = deltas
                .iter()
                .zip(&pres[l - 1])
                .map(|(d, z)| {
                    (0..layer.inputs)
                        .map(|k| {
                            if z[k] <= 0.0 {
                                0.0
                            } else {
                                (0..layer.outputs).map(|o| layer.weights[o * layer.inputs + k] * d[o]).sum()
                            }
                        })
                        .collect()
                })
                .collect();
        }
        gw.extend(gb);
        per_layer[l] = gw;
    }
    Ok(per_layer.concat())
}

/// Mean loss over a batch; used by finite-difference checks.
pub fn mean_loss(params: &MlpParams, batch: &[LabeledExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut total = 0.0;
    for ex in batch {
        check_label(params, ex.label)?;
        total += loss(&logits(params, &ex.features)?, ex.label);
    }
    Ok(total / batch.len() as f64)
}

/// Fraction of examples whose argmax logit equals the label.
pub fn evaluate(params: &MlpParams, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let correct = examples
        .par_iter()
        .map(|ex| logits(params, &ex.features).map(|l| usize::from(argmax(&l) == ex.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / examples.len() as f64)
}
