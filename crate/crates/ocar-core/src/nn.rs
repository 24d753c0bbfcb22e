//! Minimal reverse-mode differentiable feed-forward network.
//!
//! Beyond plain forward/backward, every pass exposes the per-layer statistics
//! the curvature code needs: bias-augmented input activations `ā` and
//! per-example pre-activation output gradients `g`. Only fully connected
//! layers with ReLU or identity activations are supported.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BatchTargets;
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("class index {label} out of range for {out_dim} outputs")]
    InvalidClassIndex { label: usize, out_dim: usize },
    #[error("snapshot io: {0}")]
    SnapshotIo(#[from] std::io::Error),
    #[error("snapshot sidecar: {0}")]
    SnapshotSidecar(#[from] serde_json::Error),
    #[error("snapshot payload has {got} values, shape wants {expected}")]
    SnapshotLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    ReLU,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Softmax + cross-entropy over class indices.
    SoftmaxCE,
    /// Unit-variance Gaussian head; loss is ½·MSE.
    GaussianMSE,
}

/// Whether gradients are taken against observed labels (training) or labels
/// sampled from the model's own predictive distribution (Fisher statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    TrueLabels,
    SampledLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix, // out_dim × in_dim
    pub bias: Vector,   // out_dim
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub head: HeadKind,
}

/// Per-layer mean gradient for one step, split into weight and bias parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vector,
}

impl LayerGrads {
    pub fn zeros_like(layer: &Layer) -> Self {
        LayerGrads {
            weight: Matrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: Vector::zeros(layer.out_dim()),
        }
    }

    /// `[W | b]` as a single out_dim × (in_dim+1) matrix, the shape the
    /// Kronecker preconditioner works on.
    pub fn combined(&self) -> Matrix {
        let out = self.weight.rows;
        let inc = self.weight.cols + 1;
        let mut m = Matrix::zeros(out, inc);
        for i in 0..out {
            m.row_mut(i)[..self.weight.cols].copy_from_slice(self.weight.row(i));
            m[(i, inc - 1)] = self.bias.data[i];
        }
        m
    }

    pub fn from_combined(m: &Matrix) -> Self {
        let out = m.rows;
        let in_dim = m.cols - 1;
        let mut weight = Matrix::zeros(out, in_dim);
        let mut bias = Vector::zeros(out);
        for i in 0..out {
            weight.row_mut(i).copy_from_slice(&m.row(i)[..in_dim]);
            bias.data[i] = m[(i, in_dim)];
        }
        LayerGrads { weight, bias }
    }

    pub fn scale(&self, s: f64) -> Self {
        LayerGrads {
            weight: self.weight.scale(s),
            bias: Vector {
                data: self.bias.data.iter().map(|x| x * s).collect(),
            },
        }
    }

    pub fn squared_l2(&self) -> f64 {
        self.weight.data.iter().map(|x| x * x).sum::<f64>()
            + self.bias.data.iter().map(|x| x * x).sum::<f64>()
    }
}

/// Activations cached by a forward pass.
///
/// `augmented_inputs[l]` is `ā_l`, the batch of layer-l inputs with a 1
/// appended for the bias; `pre_activations[l]` is `z_l` before the activation
/// function; `outputs` are the final pre-activation outputs (logits or
/// regression predictions).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub augmented_inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    pub outputs: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.outputs.rows
    }
}

/// Gradients from a backward pass.
///
/// `layer_grads` are the batch-mean training gradients; `output_grads[l]` is
/// the batch × out_dim matrix of per-example gradients `g_l` of each
/// example's own loss with respect to the layer's pre-activation outputs
/// (not scaled by 1/batch), which is what the Fisher factors average.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub layer_grads: Vec<LayerGrads>,
    pub output_grads: Vec<Matrix>,
}

impl Network {
    /// Fully connected net with ReLU hidden layers and an identity output
    /// layer. Weights are N(0, 1/in_dim), biases zero.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        head: HeadKind,
        rng: &mut impl Rng,
    ) -> Network {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(random_layer(prev, h, Activation::ReLU, rng));
            prev = h;
        }
        layers.push(random_layer(prev, out_dim, Activation::Identity, rng));
        Network { layers, head }
    }

    /// Single zero-initialized identity layer, the convex-experiment model.
    pub fn linear_model(input_dim: usize, out_dim: usize, head: HeadKind) -> Network {
        Network {
            layers: vec![Layer {
                weight: Matrix::zeros(out_dim, input_dim),
                bias: Vector::zeros(out_dim),
                activation: Activation::Identity,
            }],
            head,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    /// Flatten all parameters: per layer, weight row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias.data);
        }
        out
    }

    /// Replace all parameters from a flat vector in [`Network::flatten`] order.
    pub fn load_flat(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.num_params() {
            return Err(NnError::SnapshotLength {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.weight.data.len();
            l.weight.data.copy_from_slice(&params[off..off + wn]);
            off += wn;
            let bn = l.bias.len();
            l.bias.data.copy_from_slice(&params[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    /// Forward pass caching the statistics backward and K-FAC need.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache, NnError> {
        if x.cols != self.in_dim() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} input columns", self.in_dim()),
                got: format!("{}", x.cols),
            });
        }
        let batch = x.rows;
        let mut augmented_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let mut aug = Matrix::zeros(batch, layer.in_dim() + 1);
            for b in 0..batch {
                aug.row_mut(b)[..layer.in_dim()].copy_from_slice(current.row(b));
                aug[(b, layer.in_dim())] = 1.0;
            }
            // z = current·Wᵀ + b
            let mut z = Matrix::zeros(batch, layer.out_dim());
            for b in 0..batch {
                let xrow = current.row(b);
                let zrow = z.row_mut(b);
                for o in 0..layer.out_dim() {
                    let wrow = layer.weight.row(o);
                    let mut acc = layer.bias.data[o];
                    for (xi, wi) in xrow.iter().zip(wrow) {
                        acc += xi * wi;
                    }
                    zrow[o] = acc;
                }
            }
            let next = match layer.activation {
                Activation::Identity => z.clone(),
                Activation::ReLU => Matrix {
                    rows: z.rows,
                    cols: z.cols,
                    data: z.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                },
            };
            augmented_inputs.push(aug);
            pre_activations.push(z);
            current = next;
        }
        Ok(ForwardCache {
            augmented_inputs,
            outputs: pre_activations.last().unwrap().clone(),
            pre_activations,
        })
    }

    /// Loss and exact reverse-mode gradients for the cached batch.
    ///
    /// `TrueLabels` gives the training gradient against the supplied targets;
    /// `SampledLabels` draws one label per example from the model's own
    /// predictive distribution, which is what the "real" Fisher statistics
    /// require. The returned loss is always measured against the labels the
    /// gradient used.
    pub fn loss_and_grad(
        &self,
        cache: &ForwardCache,
        targets: &BatchTargets,
        mode: LabelMode,
        rng: &mut impl Rng,
    ) -> Result<(f64, BackwardResult), NnError> {
        let batch = cache.batch_size();
        if targets.len() != batch {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} targets", batch),
                got: format!("{}", targets.len()),
            });
        }
        let k = self.out_dim();
        // per-example output deltas: d(example loss)/d(outputs)
        let (loss, mut delta) = match (self.head, targets) {
            (HeadKind::SoftmaxCE, BatchTargets::Classes(labels)) => {
                let probs = softmax_rows(&cache.outputs);
                let used: Vec<usize> = match mode {
                    LabelMode::TrueLabels => {
                        for &y in labels {
                            if y >= k {
                                return Err(NnError::InvalidClassIndex { label: y, out_dim: k });
                            }
                        }
                        labels.clone()
                    }
                    LabelMode::SampledLabels => (0..batch)
                        .map(|b| sample_categorical(probs.row(b), rng))
                        .collect(),
                };
                let mut loss = 0.0;
                let mut delta = probs.clone();
                for b in 0..batch {
                    loss -= probs[(b, used[b])].max(f64::MIN_POSITIVE).ln();
                    delta[(b, used[b])] -= 1.0;
                }
                (loss / batch as f64, delta)
            }
            (HeadKind::GaussianMSE, BatchTargets::Values(t)) => {
                if t.cols != k {
                    return Err(NnError::ShapeMismatch {
                        expected: format!("{} target columns", k),
                        got: format!("{}", t.cols),
                    });
                }
                let used: Matrix = match mode {
                    LabelMode::TrueLabels => t.clone(),
                    LabelMode::SampledLabels => {
                        // y ~ N(f, I)
                        let normal = Normal::new(0.0, 1.0).unwrap();
                        let mut s = cache.outputs.clone();
                        for v in s.data.iter_mut() {
                            *v += normal.sample(rng);
                        }
                        s
                    }
                };
                let mut loss = 0.0;
                let mut delta = Matrix::zeros(batch, k);
                for b in 0..batch {
                    for j in 0..k {
                        let d = cache.outputs[(b, j)] - used[(b, j)];
                        loss += 0.5 * d * d;
                        delta[(b, j)] = d;
                    }
                }
                (loss / batch as f64, delta)
            }
            (HeadKind::SoftmaxCE, BatchTargets::Values(_)) => {
                return Err(NnError::ShapeMismatch {
                    expected: "class targets for softmax head".into(),
                    got: "regression targets".into(),
                })
            }
            (HeadKind::GaussianMSE, BatchTargets::Classes(_)) => {
                return Err(NnError::ShapeMismatch {
                    expected: "regression targets for gaussian head".into(),
                    got: "class targets".into(),
                })
            }
        };

        // Backward. `delta` holds per-example d(loss_b)/d(z_l), unscaled.
        let n_layers = self.layers.len();
        let mut layer_grads = vec![LayerGrads::zeros_like(&self.layers[0]); 0];
        layer_grads.reserve(n_layers);
        let mut output_grads = Vec::with_capacity(n_layers);
        let mut grads_rev = Vec::with_capacity(n_layers);
        let mut gi_rev = Vec::with_capacity(n_layers);
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let aug = &cache.augmented_inputs[l];
            let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
            // mean gradient: [W|b] = δᵀ·ā / B
            let mut wgrad = Matrix::zeros(out_dim, in_dim);
            let mut bgrad = Vector::zeros(out_dim);
            let inv_b = 1.0 / batch as f64;
            for b in 0..batch {
                let drow = delta.row(b);
                let arow = aug.row(b);
                for o in 0..out_dim {
                    let d = drow[o];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = wgrad.row_mut(o);
                    for i in 0..in_dim {
                        wrow[i] += d * arow[i];
                    }
                    bgrad.data[o] += d;
                }
            }
            for v in wgrad.data.iter_mut() {
                *v *= inv_b;
            }
            for v in bgrad.data.iter_mut() {
                *v *= inv_b;
            }
            grads_rev.push(LayerGrads {
                weight: wgrad,
                bias: bgrad,
            });
            gi_rev.push(delta.clone());

            if l > 0 {
                // propagate: δ_prev = (δ·W) ∘ act'(z_prev)
                let mut prev = Matrix::zeros(batch, in_dim);
                for b in 0..batch {
                    let drow = delta.row(b);
                    let prow = prev.row_mut(b);
                    for o in 0..out_dim {
                        let d = drow[o];
                        if d == 0.0 {
                            continue;
                        }
                        let wrow = layer.weight.row(o);
                        for i in 0..in_dim {
                            prow[i] += d * wrow[i];
                        }
                    }
                }
                let z_prev = &cache.pre_activations[l - 1];
                if self.layers[l - 1].activation == Activation::ReLU {
                    for (p, z) in prev.data.iter_mut().zip(&z_prev.data) {
                        if *z <= 0.0 {
                            *p = 0.0;
                        }
                    }
                }
                delta = prev;
            }
        }
        grads_rev.reverse();
        gi_rev.reverse();
        layer_grads.extend(grads_rev);
        output_grads.extend(gi_rev);
        Ok((loss, BackwardResult { layer_grads, output_grads }))
    }

    /// Forward + loss against true labels, without gradients.
    pub fn loss_value(&self, x: &Matrix, targets: &BatchTargets) -> Result<f64, NnError> {
        let cache = self.forward(x)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (loss, _) = self.loss_and_grad(&cache, targets, LabelMode::TrueLabels, &mut rng)?;
        Ok(loss)
    }

    /// Grow the classifier to `new_num_classes` outputs.
    ///
    /// Existing rows are kept bit-exactly; new weight rows are drawn from
    /// N(0, 1/in_dim) with the run's RNG and new biases start at zero.
    /// Returns whether the classifier actually grew (consumed by the
    /// curvature state to reset its last G factor).
    pub fn grow_classifier(&mut self, new_num_classes: usize, rng: &mut impl Rng) -> bool {
        let last = self.layers.last_mut().unwrap();
        let old = last.out_dim();
        if new_num_classes <= old {
            return false;
        }
        let in_dim = last.in_dim();
        let std = (1.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let mut weight = Matrix::zeros(new_num_classes, in_dim);
        for i in 0..old {
            weight.row_mut(i).copy_from_slice(last.weight.row(i));
        }
        for i in old..new_num_classes {
            for v in weight.row_mut(i) {
                *v = normal.sample(rng);
            }
        }
        let mut bias = Vector::zeros(new_num_classes);
        bias.data[..old].copy_from_slice(&last.bias.data);
        last.weight = weight;
        last.bias = bias;
        true
    }

    /// `w ← w − step·direction`, elementwise.
    pub fn apply_update(&mut self, direction: &[LayerGrads], step: f64) -> Result<(), NnError> {
        if direction.len() != self.layers.len() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} layers", self.layers.len()),
                got: format!("{}", direction.len()),
            });
        }
        for (layer, d) in self.layers.iter_mut().zip(direction) {
            if layer.weight.rows != d.weight.rows
                || layer.weight.cols != d.weight.cols
                || layer.bias.len() != d.bias.len()
            {
                return Err(NnError::ShapeMismatch {
                    expected: format!("{}x{} weights", layer.weight.rows, layer.weight.cols),
                    got: format!("{}x{} weights", d.weight.rows, d.weight.cols),
                });
            }
            for (w, g) in layer.weight.data.iter_mut().zip(&d.weight.data) {
                *w -= step * g;
            }
            for (b, g) in layer.bias.data.iter_mut().zip(&d.bias.data) {
                *b -= step * g;
            }
        }
        Ok(())
    }

    /// Features entering the final layer (used by linear probing).
    pub fn penultimate_features(&self, x: &Matrix) -> Result<Matrix, NnError> {
        let cache = self.forward(x)?;
        let n = self.layers.len();
        assert!(n >= 2, "probing needs at least two layers");
        // input to the last layer = augmented input minus the bias column
        let aug = &cache.augmented_inputs[n - 1];
        let dim = aug.cols - 1;
        let mut feats = Matrix::zeros(aug.rows, dim);
        for b in 0..aug.rows {
            feats.row_mut(b).copy_from_slice(&aug.row(b)[..dim]);
        }
        Ok(feats)
    }
}

fn random_layer(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Layer {
    let std = (1.0 / in_dim as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let mut weight = Matrix::zeros(out_dim, in_dim);
    for v in weight.data.iter_mut() {
        *v = normal.sample(rng);
    }
    Layer {
        weight,
        bias: Vector::zeros(out_dim),
        activation,
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for b in 0..logits.rows {
        let row = logits.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let orow = out.row_mut(b);
        for (o, &z) in orow.iter_mut().zip(row) {
            let e = (z - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Per-example flattened score vectors, one row per example.
///
/// Row b is the gradient of example b's own loss with respect to every
/// parameter, in [`Network::flatten`] order. Only used for the dense-Fisher
/// baselines and diagnostics, so the batch × n_params cost is acceptable.
pub fn per_example_flat_scores(
    net: &Network,
    cache: &ForwardCache,
    backward: &BackwardResult,
) -> Matrix {
    let batch = cache.batch_size();
    let n = net.num_params();
    let mut scores = Matrix::zeros(batch, n);
    for b in 0..batch {
        let mut off = 0;
        for (l, layer) in net.layers.iter().enumerate() {
            let delta = backward.output_grads[l].row(b);
            let aug = cache.augmented_inputs[l].row(b);
            let in_dim = layer.in_dim();
            let row = scores.row_mut(b);
            for (o, &d) in delta.iter().enumerate() {
                let base = off + o * in_dim;
                for i in 0..in_dim {
                    row[base + i] = d * aug[i];
                }
            }
            off += layer.out_dim() * in_dim;
            for (o, &d) in delta.iter().enumerate() {
                row[off + o] = d; // bias column is the appended 1
            }
            off += layer.out_dim();
        }
    }
    scores
}

/// Mean of per-example squared gradients (empirical Fisher diagonal),
/// shaped like the layer gradients. Used by the EWC baseline only.
pub fn empirical_fisher_diag(
    net: &Network,
    cache: &ForwardCache,
    backward: &BackwardResult,
) -> Vec<LayerGrads> {
    let batch = cache.batch_size() as f64;
    net.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let delta = &backward.output_grads[l];
            let aug = &cache.augmented_inputs[l];
            let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
            let mut weight = Matrix::zeros(out_dim, in_dim);
            let mut bias = Vector::zeros(out_dim);
            for b in 0..delta.rows {
                let drow = delta.row(b);
                let arow = aug.row(b);
                for o in 0..out_dim {
                    let d2 = drow[o] * drow[o];
                    if d2 == 0.0 {
                        continue;
                    }
                    let wrow = weight.row_mut(o);
                    for i in 0..in_dim {
                        wrow[i] += d2 * arow[i] * arow[i];
                    }
                    bias.data[o] += d2;
                }
            }
            for v in weight.data.iter_mut() {
                *v /= batch;
            }
            for v in bias.data.iter_mut() {
                *v /= batch;
            }
            LayerGrads { weight, bias }
        })
        .collect()
}

/// Layer shapes stored in the snapshot sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub layers: Vec<LayerShape>,
    pub head: HeadKind,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl NetworkShape {
    pub fn of(net: &Network) -> Self {
        NetworkShape {
            layers: net
                .layers
                .iter()
                .map(|l| LayerShape {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: l.activation,
                })
                .collect(),
            head: net.head,
            param_count: net.num_params(),
        }
    }

    pub fn build(&self, params: &[f64]) -> Result<Network, NnError> {
        let mut net = Network {
            layers: self
                .layers
                .iter()
                .map(|s| Layer {
                    weight: Matrix::zeros(s.out_dim, s.in_dim),
                    bias: Vector::zeros(s.out_dim),
                    activation: s.activation,
                })
                .collect(),
            head: self.head,
        };
        net.load_flat(params)?;
        Ok(net)
    }
}

fn sidecar_path(bin_path: &Path) -> std::path::PathBuf {
    let mut s = bin_path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Write a parameter snapshot: flat little-endian f64 payload plus a JSON
/// sidecar (`<path>.json`) describing the layer shapes.
pub fn write_snapshot(net: &Network, bin_path: &Path) -> Result<(), NnError> {
    if let Some(parent) = bin_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let flat = net.flatten();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(bin_path)?;
    f.write_all(&bytes)?;
    let sidecar = serde_json::to_string_pretty(&NetworkShape::of(net))?;
    fs::write(sidecar_path(bin_path), sidecar)?;
    Ok(())
}

/// Read a snapshot written by [`write_snapshot`].
pub fn read_snapshot(bin_path: &Path) -> Result<Network, NnError> {
    let shape: NetworkShape = serde_json::from_str(&fs::read_to_string(sidecar_path(bin_path))?)?;
    let bytes = fs::read(bin_path)?;
    if bytes.len() % 8 != 0 {
        return Err(NnError::SnapshotLength {
            expected: shape.param_count,
            got: bytes.len() / 8,
        });
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if params.len() != shape.param_count {
        return Err(NnError::SnapshotLength {
            expected: shape.param_count,
            got: params.len(),
        });
    }
    shape.build(&params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn class_targets(labels: &[usize]) -> BatchTargets {
        BatchTargets::Classes(labels.to_vec())
    }

    #[test]
    fn zero_weight_softmax_logits_zero_and_loss_ln_k() {
        let net = Network {
            layers: vec![Layer {
                weight: Matrix::zeros(5, 3),
                bias: Vector::zeros(5),
                activation: Activation::Identity,
            }],
            head: HeadKind::SoftmaxCE,
        };
        let x = Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0]]);
        let cache = net.forward(&x).unwrap();
        assert!(cache.outputs.max_abs() == 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, _) = net
            .loss_and_grad(&cache, &class_targets(&[0, 4]), LabelMode::TrueLabels, &mut rng)
            .unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_layer_passthrough() {
        let net = Network {
            layers: vec![Layer {
                weight: Matrix::identity(3),
                bias: Vector::zeros(3),
                activation: Activation::Identity,
            }],
            head: HeadKind::GaussianMSE,
        };
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]);
        let cache = net.forward(&x).unwrap();
        assert_eq!(cache.outputs, x);
    }

    #[test]
    fn two_layer_relu_hand_unrolled() {
        // W1 = [[1, -1], [0.5, 2]], b1 = [0, -1], ReLU
        // W2 = [[1, 1]], b2 = [0.5]
        let net = Network {
            layers: vec![
                Layer {
                    weight: Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]),
                    bias: Vector::from_slice(&[0.0, -1.0]),
                    activation: Activation::ReLU,
                },
                Layer {
                    weight: Matrix::from_rows(&[vec![1.0, 1.0]]),
                    bias: Vector::from_slice(&[0.5]),
                    activation: Activation::Identity,
                },
            ],
            head: HeadKind::GaussianMSE,
        };
        // x = (2, 1): z1 = (2-1, 1+2-1) = (1, 2) → relu (1, 2); out = 1+2+0.5
        let x = Matrix::from_rows(&[vec![2.0, 1.0]]);
        let cache = net.forward(&x).unwrap();
        assert!((cache.outputs[(0, 0)] - 3.5).abs() < 1e-15);
        // x = (-1, 0): z1 = (-1, -1.5) → relu (0, 0); out = 0.5
        let x2 = Matrix::from_rows(&[vec![-1.0, 0.0]]);
        let cache2 = net.forward(&x2).unwrap();
        assert!((cache2.outputs[(0, 0)] - 0.5).abs() < 1e-15);
        // ā_1 carries the appended 1
        assert_eq!(cache.augmented_inputs[1].row(0), &[1.0, 2.0, 1.0]);
    }

    #[test]
    fn mse_zero_at_target() {
        let net = Network {
            layers: vec![Layer {
                weight: Matrix::identity(2),
                bias: Vector::zeros(2),
                activation: Activation::Identity,
            }],
            head: HeadKind::GaussianMSE,
        };
        let x = Matrix::from_rows(&[vec![1.0, -1.0]]);
        let cache = net.forward(&x).unwrap();
        let targets = BatchTargets::Values(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, back) = net
            .loss_and_grad(&cache, &targets, LabelMode::TrueLabels, &mut rng)
            .unwrap();
        assert_eq!(loss, 0.0);
        for g in &back.layer_grads {
            assert_eq!(g.weight.max_abs(), 0.0);
            assert!(g.bias.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_class_index_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::mlp(2, &[], 3, HeadKind::SoftmaxCE, &mut rng);
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let cache = net.forward(&x).unwrap();
        let err = net.loss_and_grad(&cache, &class_targets(&[3]), LabelMode::TrueLabels, &mut rng);
        assert!(matches!(err, Err(NnError::InvalidClassIndex { label: 3, out_dim: 3 })));
    }

    /// Central finite differences over every parameter.
    fn finite_diff_check(net: &Network, x: &Matrix, targets: &BatchTargets) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = net.forward(x).unwrap();
        let (_, back) = net
            .loss_and_grad(&cache, targets, LabelMode::TrueLabels, &mut rng)
            .unwrap();
        let analytic: Vec<f64> = back
            .layer_grads
            .iter()
            .flat_map(|g| {
                g.weight
                    .data
                    .iter()
                    .cloned()
                    .chain(g.bias.data.iter().cloned())
                    .collect::<Vec<_>>()
            })
            .collect();
        let flat = net.flatten();
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..flat.len() {
            let mut plus = net.clone();
            let mut params = flat.clone();
            params[i] += h;
            plus.load_flat(&params).unwrap();
            let lp = plus.loss_value(x, targets).unwrap();
            params[i] -= 2.0 * h;
            plus.load_flat(&params).unwrap();
            let lm = plus.loss_value(x, targets).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
            max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
        }
        max_rel
    }

    /// Randomize biases too; zero biases put ReLU pre-activations exactly on
    /// the kink for fully dead examples, where finite differences are invalid.
    fn randomize_biases(net: &mut Network, rng: &mut impl Rng) {
        for layer in &mut net.layers {
            for b in layer.bias.data.iter_mut() {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Network::mlp(4, &[7, 5], 3, HeadKind::SoftmaxCE, &mut rng);
            randomize_biases(&mut net, &mut rng);
            let mut x = Matrix::zeros(6, 4);
            for v in x.data.iter_mut() {
                *v = rng.gen_range(-1.5..1.5);
            }
            let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
            let max_rel = finite_diff_check(&net, &x, &class_targets(&labels));
            assert!(max_rel <= 1e-5, "seed {seed}: max rel err {max_rel:.3e}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut net = Network::mlp(3, &[6], 2, HeadKind::GaussianMSE, &mut rng);
        randomize_biases(&mut net, &mut rng);
        let mut x = Matrix::zeros(5, 3);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut t = Matrix::zeros(5, 2);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let max_rel = finite_diff_check(&net, &x, &BatchTargets::Values(t));
        assert!(max_rel <= 1e-5, "max rel err {max_rel:.3e}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut z = Matrix::zeros(20, 7);
        for v in z.data.iter_mut() {
            *v = rng.gen_range(-30.0..30.0);
        }
        let p = softmax_rows(&z);
        for b in 0..p.rows {
            let s: f64 = p.row(b).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sampled_labels_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::mlp(3, &[4], 5, HeadKind::SoftmaxCE, &mut rng);
        let mut x = Matrix::zeros(8, 3);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let cache = net.forward(&x).unwrap();
        let t = class_targets(&[0; 8]);
        let mut r1 = ChaCha8Rng::seed_from_u64(123);
        let mut r2 = ChaCha8Rng::seed_from_u64(123);
        let (l1, b1) = net
            .loss_and_grad(&cache, &t, LabelMode::SampledLabels, &mut r1)
            .unwrap();
        let (l2, b2) = net
            .loss_and_grad(&cache, &t, LabelMode::SampledLabels, &mut r2)
            .unwrap();
        assert_eq!(l1, l2);
        for (a, b) in b1.layer_grads.iter().zip(&b2.layer_grads) {
            assert_eq!(a.weight.data, b.weight.data);
        }
    }

    #[test]
    fn grow_preserves_old_rows_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::mlp(4, &[6], 5, HeadKind::SoftmaxCE, &mut rng);
        let before = net.layers.last().unwrap().clone();
        let grew = net.grow_classifier(10, &mut rng);
        assert!(grew);
        let after = net.layers.last().unwrap();
        assert_eq!(after.out_dim(), 10);
        for i in 0..5 {
            assert_eq!(after.weight.row(i), before.weight.row(i));
            assert_eq!(after.bias.data[i], before.bias.data[i]);
        }
    }

    #[test]
    fn grow_same_size_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::mlp(4, &[6], 5, HeadKind::SoftmaxCE, &mut rng);
        let before = net.clone();
        assert!(!net.grow_classifier(5, &mut rng));
        assert_eq!(net, before);
    }

    #[test]
    fn grow_keeps_old_class_logits_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Network::mlp(4, &[6], 5, HeadKind::SoftmaxCE, &mut rng);
        let mut x = Matrix::zeros(3, 4);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let before = net.forward(&x).unwrap().outputs;
        net.grow_classifier(9, &mut rng);
        let after = net.forward(&x).unwrap().outputs;
        for b in 0..3 {
            for c in 0..5 {
                assert_eq!(before[(b, c)].to_bits(), after[(b, c)].to_bits());
            }
        }
    }

    #[test]
    fn apply_update_step_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::mlp(3, &[4], 2, HeadKind::SoftmaxCE, &mut rng);
        let before = net.clone();
        let dir: Vec<LayerGrads> = net.layers.iter().map(LayerGrads::zeros_like).collect();
        net.apply_update(&dir, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn apply_update_full_step_zeroes_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::mlp(3, &[4], 2, HeadKind::SoftmaxCE, &mut rng);
        let dir: Vec<LayerGrads> = net
            .layers
            .iter()
            .map(|l| LayerGrads {
                weight: l.weight.clone(),
                bias: l.bias.clone(),
            })
            .collect();
        net.apply_update(&dir, 1.0).unwrap();
        assert!(net.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // ½(w·1 − 2)² on a 1-input linear model: minimum at w + b = 2.
        let mut net = Network::linear_model(1, 1, HeadKind::GaussianMSE);
        let x = Matrix::from_rows(&[vec![1.0]]);
        let t = BatchTargets::Values(Matrix::from_rows(&[vec![2.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let cache = net.forward(&x).unwrap();
            let (_, back) = net
                .loss_and_grad(&cache, &t, LabelMode::TrueLabels, &mut rng)
                .unwrap();
            net.apply_update(&back.layer_grads, 0.4).unwrap();
        }
        let pred = net.forward(&x).unwrap().outputs[(0, 0)];
        assert!((pred - 2.0).abs() < 1e-10);
    }

    #[test]
    fn per_example_scores_match_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::mlp(3, &[4], 2, HeadKind::SoftmaxCE, &mut rng);
        let mut x = Matrix::zeros(5, 3);
        for v in x.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let cache = net.forward(&x).unwrap();
        let (_, back) = net
            .loss_and_grad(&cache, &class_targets(&[0, 1, 0, 1, 1]), LabelMode::TrueLabels, &mut rng)
            .unwrap();
        let scores = per_example_flat_scores(&net, &cache, &back);
        let mean_from_scores: Vec<f64> = (0..scores.cols)
            .map(|j| (0..scores.rows).map(|b| scores[(b, j)]).sum::<f64>() / scores.rows as f64)
            .collect();
        let mean_grad: Vec<f64> = back
            .layer_grads
            .iter()
            .flat_map(|g| {
                g.weight
                    .data
                    .iter()
                    .cloned()
                    .chain(g.bias.data.iter().cloned())
                    .collect::<Vec<_>>()
            })
            .collect();
        for (a, b) in mean_from_scores.iter().zip(&mean_grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_roundtrip() {
        let dir = std::env::temp_dir().join("ocar_nn_snapshot_test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = Network::mlp(6, &[5, 4], 3, HeadKind::SoftmaxCE, &mut rng);
        let path = dir.join("snap.bin");
        write_snapshot(&net, &path).unwrap();
        let restored = read_snapshot(&path).unwrap();
        assert_eq!(net, restored);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
