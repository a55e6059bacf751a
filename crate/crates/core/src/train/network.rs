use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{epoch_order, EarlyStop, TrainConfig, TrainLog};
use crate::attack::InputClassifier;
use crate::classify::{predict_and_margin, LinearClassifier};
use crate::error::{invalid, mismatch, Error, Result};

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPS: f64 = 1e-5;
/// Positive feature map of the linear-attention layer: `elu(x) + 1`.
pub const ATTENTION_FEATURE_MAP: &str = "elu_plus_one";

const DIVERGENCE_LOSS: f64 = 1e6;
const CHECKPOINT_MAGIC: &[u8; 4] = b"GBPN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    DenseShallow,
    DenseDeep,
    LinearTransformer,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::DenseShallow, Architecture::DenseDeep, Architecture::LinearTransformer];

    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::DenseShallow => "dense_shallow",
            Architecture::DenseDeep => "dense_deep",
            Architecture::LinearTransformer => "linear_transformer",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }

    fn code(&self) -> u8 {
        match self {
            Architecture::DenseShallow => 0,
            Architecture::DenseDeep => 1,
            Architecture::LinearTransformer => 2,
        }
    }
}

/// Layer widths and token size of an experiment family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Regression of pooled norms; every network ends in a rectifier.
    Synthetic,
    /// Ten-way classification; the softmax lives in the objective.
    Mnist,
}

impl Preset {
    pub fn token_size(&self) -> usize {
        match self {
            Preset::Synthetic => 4,
            Preset::Mnist => 28,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = W x + b` with `W` of shape `out x in`.
    Dense { weights: DMatrix<f64>, bias: DVector<f64> },
    BatchNorm { scale: DVector<f64>, shift: DVector<f64>, running_mean: DVector<f64>, running_var: DVector<f64> },
    Relu { dim: usize },
    /// Single-head linear attention over `tokens` consecutive patches of
    /// `token_dim` inputs, each mapped to `width` features. Projections have
    /// shape `width x token_dim`.
    LinearAttention {
        tokens: usize,
        token_dim: usize,
        width: usize,
        wq: DMatrix<f64>,
        bq: DVector<f64>,
        wk: DMatrix<f64>,
        bk: DVector<f64>,
        wv: DMatrix<f64>,
        bv: DVector<f64>,
    },
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

impl Layer {
    /// He-initialized affine layer.
    pub fn dense(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Layer::Dense { weights: gaussian(rng, output, input, (2.0 / input as f64).sqrt()), bias: DVector::zeros(output) }
    }

    pub fn batch_norm(dim: usize) -> Self {
        Layer::BatchNorm {
            scale: DVector::from_element(dim, 1.0),
            shift: DVector::zeros(dim),
            running_mean: DVector::zeros(dim),
            running_var: DVector::from_element(dim, 1.0),
        }
    }

    pub fn relu(dim: usize) -> Self {
        Layer::Relu { dim }
    }

    pub fn attention(tokens: usize, token_dim: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / token_dim as f64).sqrt();
        Layer::LinearAttention {
            tokens,
            token_dim,
            width,
            wq: gaussian(rng, width, token_dim, std),
            bq: DVector::zeros(width),
            wk: gaussian(rng, width, token_dim, std),
            bk: DVector::zeros(width),
            wv: gaussian(rng, width, token_dim, std),
            bv: DVector::zeros(width),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Layer::Dense { weights, .. } => weights.ncols(),
            Layer::BatchNorm { scale, .. } => scale.len(),
            Layer::Relu { dim } => *dim,
            Layer::LinearAttention { tokens, token_dim, .. } => tokens * token_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Layer::Dense { weights, .. } => weights.nrows(),
            Layer::BatchNorm { scale, .. } => scale.len(),
            Layer::Relu { dim } => *dim,
            Layer::LinearAttention { tokens, width, .. } => tokens * width,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::Relu { .. } => "relu",
            Layer::LinearAttention { .. } => "linear_attention",
        }
    }

    /// Trainable parameter blocks, in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Dense { weights, bias } => vec![weights.as_slice(), bias.as_slice()],
            Layer::BatchNorm { scale, shift, .. } => vec![scale.as_slice(), shift.as_slice()],
            Layer::Relu { .. } => vec![],
            Layer::LinearAttention { wq, bq, wk, bk, wv, bv, .. } => {
                vec![wq.as_slice(), bq.as_slice(), wk.as_slice(), bk.as_slice(), wv.as_slice(), bv.as_slice()]
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Dense { weights, bias } => vec![weights.as_mut_slice(), bias.as_mut_slice()],
            Layer::BatchNorm { scale, shift, .. } => vec![scale.as_mut_slice(), shift.as_mut_slice()],
            Layer::Relu { .. } => vec![],
            Layer::LinearAttention { wq, bq, wk, bk, wv, bv, .. } => vec![
                wq.as_mut_slice(),
                bq.as_mut_slice(),
                wk.as_mut_slice(),
                bk.as_mut_slice(),
                wv.as_mut_slice(),
                bv.as_mut_slice(),
            ],
        }
    }
}

fn add_row(m: &mut DMatrix<f64>, v: &DVector<f64>) {
    for mut row in m.row_iter_mut() {
        row += v.transpose();
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

fn feature_map(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

fn feature_map_slope(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

// Per-sample attention pieces, recomputed in the backward pass.
struct AttentionPass {
    tokens: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// `phi(Q) phi(K)^T`, tokens x tokens.
    scores: DMatrix<f64>,
    numer: DMatrix<f64>,
    denom: DVector<f64>,
}

#[allow(clippy::too_many_arguments)]
fn attention_pass(
    row: &[f64],
    tokens: usize,
    token_dim: usize,
    wq: &DMatrix<f64>,
    bq: &DVector<f64>,
    wk: &DMatrix<f64>,
    bk: &DVector<f64>,
    wv: &DMatrix<f64>,
    bv: &DVector<f64>,
) -> AttentionPass {
    let x = DMatrix::from_fn(tokens, token_dim, |t, c| row[t * token_dim + c]);
    let project = |w: &DMatrix<f64>, b: &DVector<f64>| {
        let mut p = &x * w.transpose();
        add_row(&mut p, b);
        p
    };
    let (q, k, v) = (project(wq, bq), project(wk, bk), project(wv, bv));
    let scores = q.map(feature_map) * k.map(feature_map).transpose();
    let numer = &scores * &v;
    let denom = DVector::from_iterator(tokens, scores.row_iter().map(|r| r.sum()));
    AttentionPass { tokens: x, q, k, v, scores, numer, denom }
}

enum Cache {
    Dense(DMatrix<f64>),
    Relu(DMatrix<f64>),
    BatchNorm { normalized: DMatrix<f64>, inv_std: DVector<f64> },
    Attention(DMatrix<f64>),
}

/// Batch statistics of each batch-norm layer from a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats(Vec<Option<(DVector<f64>, DVector<f64>)>>);

#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    /// One entry per parameter block, aligned with [`FeedforwardModel::params`].
    pub grads: Vec<Vec<f64>>,
    /// Gradient with respect to the batch inputs (rows are samples).
    pub input_grad: DMatrix<f64>,
    pub stats: BatchStats,
}

/// Regression or classification target for the network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Mean over samples and outputs of the squared error.
    Mse,
    /// Softmax cross-entropy against one-hot targets, averaged over samples.
    SoftmaxCrossEntropy,
}

impl Objective {
    fn code(&self) -> u8 {
        match self {
            Objective::Mse => 0,
            Objective::SoftmaxCrossEntropy => 1,
        }
    }

    /// Loss and its gradient with respect to `out`.
    pub fn evaluate(&self, out: &DMatrix<f64>, targets: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let b = out.nrows() as f64;
        match self {
            Objective::Mse => {
                let diff = out - targets;
                let count = diff.len() as f64;
                (diff.norm_squared() / count, diff * (2.0 / count))
            }
            Objective::SoftmaxCrossEntropy => {
                let mut grad = DMatrix::zeros(out.nrows(), out.ncols());
                let mut loss = 0.0;
                for i in 0..out.nrows() {
                    let row = out.row(i);
                    let max = row.max();
                    let exp = row.map(|v| (v - max).exp());
                    let total = exp.sum();
                    for c in 0..out.ncols() {
                        let p = exp[c] / total;
                        let t = targets[(i, c)];
                        if t > 0.0 {
                            loss -= t * (row[c] - max - total.ln());
                        }
                        grad[(i, c)] = (p - t) / b;
                    }
                }
                (loss / b, grad)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardModel {
    pub architecture: Architecture,
    pub objective: Objective,
    layers: Vec<Layer>,
}

impl FeedforwardModel {
    /// Layer list for `architecture` under `preset`, with the final width
    /// set to `output_dim`.
    pub fn build(
        architecture: Architecture,
        preset: Preset,
        input_dim: usize,
        output_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(invalid("network dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut dim = input_dim;
        let push_dense = |layers: &mut Vec<Layer>, dim: &mut usize, out: usize, rng: &mut ChaCha8Rng| {
            layers.push(Layer::dense(*dim, out, rng));
            *dim = out;
        };
        match (preset, architecture) {
            (Preset::Synthetic, arch) => {
                match arch {
                    Architecture::DenseShallow => {}
                    Architecture::DenseDeep => {
                        for w in [96, 92, 89, 85, 82, 78] {
                            push_dense(&mut layers, &mut dim, w, &mut rng);
                            layers.push(Layer::relu(w));
                        }
                    }
                    Architecture::LinearTransformer => {
                        let layer = attention_for(input_dim, preset.token_size(), 100, &mut rng)?;
                        dim = layer.output_dim();
                        layers.push(layer);
                    }
                }
                push_dense(&mut layers, &mut dim, 75, &mut rng);
                layers.push(Layer::batch_norm(75));
                layers.push(Layer::relu(75));
                push_dense(&mut layers, &mut dim, output_dim, &mut rng);
                layers.push(Layer::relu(output_dim));
            }
            (Preset::Mnist, arch) => {
                match arch {
                    Architecture::DenseShallow => {}
                    Architecture::DenseDeep => {
                        for w in [676, 569, 461, 354, 246, 139] {
                            push_dense(&mut layers, &mut dim, w, &mut rng);
                            layers.push(Layer::relu(w));
                        }
                    }
                    Architecture::LinearTransformer => {
                        let layer = attention_for(input_dim, preset.token_size(), 784, &mut rng)?;
                        dim = layer.output_dim();
                        layers.push(layer);
                        layers.push(Layer::batch_norm(dim));
                    }
                }
                push_dense(&mut layers, &mut dim, 32, &mut rng);
                layers.push(Layer::relu(32));
                push_dense(&mut layers, &mut dim, output_dim, &mut rng);
            }
        }
        let objective = match preset {
            Preset::Synthetic => Objective::Mse,
            Preset::Mnist => Objective::SoftmaxCrossEntropy,
        };
        Self::from_layers(architecture, objective, layers)
    }

    pub fn from_layers(architecture: Architecture, objective: Objective, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("a network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(mismatch(format!(
                    "layer {i} ({}) outputs {} values but layer {} ({}) expects {}",
                    pair[0].kind(),
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].kind(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(FeedforwardModel { architecture, objective, layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Names of the parameter blocks, e.g. `"2:dense.weights"`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let parts: &[&str] = match layer {
                Layer::Dense { .. } => &["weights", "bias"],
                Layer::BatchNorm { .. } => &["scale", "shift"],
                Layer::Relu { .. } => &[],
                Layer::LinearAttention { .. } => &["wq", "bq", "wk", "bk", "wv", "bv"],
            };
            names.extend(parts.iter().map(|p| format!("{i}:{}.{p}", layer.kind())));
        }
        names
    }

    /// Inference pass on one input, using running batch-norm statistics.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.forward_batch(&DMatrix::from_row_slice(1, x.len(), x.as_slice()))?;
        Ok(out.row(0).transpose())
    }

    /// Inference pass; rows of `x` are samples.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::BatchNorm { scale, shift, running_mean, running_var, .. } => {
                    let inv = running_var.map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt());
                    let mut out = h;
                    for mut row in out.row_iter_mut() {
                        for c in 0..row.len() {
                            row[c] = (row[c] - running_mean[c]) * inv[c] * scale[c] + shift[c];
                        }
                    }
                    out
                }
                _ => layer_forward_shared(layer, &h),
            };
        }
        Ok(h)
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(invalid(format!("network expects inputs of length {}, got {}", self.input_dim(), x.ncols())));
        }
        Ok(())
    }

    /// Training-mode pass (batch statistics) with gradients of the objective.
    pub fn loss_and_gradients(&self, x: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<BatchGradients> {
        self.check_input(x)?;
        if targets.nrows() != x.nrows() || targets.ncols() != self.output_dim() {
            return Err(mismatch(format!(
                "targets are {}x{}, expected {}x{}",
                targets.nrows(),
                targets.ncols(),
                x.nrows(),
                self.output_dim()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (out, cache, stat) = layer_forward_train(layer, h);
            caches.push(cache);
            stats.push(stat);
            h = out;
        }
        let (loss, mut grad) = self.objective.evaluate(&h, targets);
        let mut per_layer: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (blocks, dx) = layer_backward(layer, cache, &grad);
            per_layer.push(blocks);
            grad = dx;
        }
        per_layer.reverse();
        Ok(BatchGradients { loss, grads: per_layer.into_iter().flatten().collect(), input_grad: grad, stats: BatchStats(stats) })
    }

    /// Moves every running batch-norm statistic toward the batch values.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        for (layer, stat) in self.layers.iter_mut().zip(&stats.0) {
            if let (Layer::BatchNorm { running_mean, running_var, .. }, Some((mean, var))) = (layer, stat) {
                *running_mean = &*running_mean * BATCHNORM_MOMENTUM + mean * (1.0 - BATCHNORM_MOMENTUM);
                *running_var = &*running_var * BATCHNORM_MOMENTUM + var * (1.0 - BATCHNORM_MOMENTUM);
            }
        }
    }
}

fn attention_for(input_dim: usize, token_size: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Layer> {
    if !input_dim.is_multiple_of(token_size) {
        return Err(invalid(format!("input length {input_dim} is not a multiple of the token size {token_size}")));
    }
    Ok(Layer::attention(input_dim / token_size, token_size, width, rng))
}

// Forward pass of the layers that behave the same in training and inference.
fn layer_forward_shared(layer: &Layer, h: &DMatrix<f64>) -> DMatrix<f64> {
    match layer {
        Layer::Dense { weights, bias } => {
            let mut out = h * weights.transpose();
            add_row(&mut out, bias);
            out
        }
        Layer::Relu { .. } => h.map(|v| v.max(0.0)),
        Layer::LinearAttention { tokens, token_dim, width, wq, bq, wk, bk, wv, bv } => {
            let mut out = DMatrix::zeros(h.nrows(), tokens * width);
            for i in 0..h.nrows() {
                let row: Vec<f64> = h.row(i).iter().copied().collect();
                let p = attention_pass(&row, *tokens, *token_dim, wq, bq, wk, bk, wv, bv);
                for t in 0..*tokens {
                    for c in 0..*width {
                        out[(i, t * width + c)] = p.numer[(t, c)] / p.denom[t];
                    }
                }
            }
            out
        }
        Layer::BatchNorm { .. } => unreachable!("batch norm depends on the mode"),
    }
}

type Stat = Option<(DVector<f64>, DVector<f64>)>;

fn layer_forward_train(layer: &Layer, h: DMatrix<f64>) -> (DMatrix<f64>, Cache, Stat) {
    match layer {
        Layer::Dense { .. } => (layer_forward_shared(layer, &h), Cache::Dense(h), None),
        Layer::Relu { .. } => (layer_forward_shared(layer, &h), Cache::Relu(h), None),
        Layer::LinearAttention { .. } => (layer_forward_shared(layer, &h), Cache::Attention(h), None),
        Layer::BatchNorm { scale, shift, .. } => {
            let b = h.nrows() as f64;
            let mean = column_sums(&h) / b;
            let mut centered = h;
            for mut row in centered.row_iter_mut() {
                row -= mean.transpose();
            }
            let var = DVector::from_iterator(centered.ncols(), centered.column_iter().map(|c| c.norm_squared() / b));
            let inv_std = var.map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt());
            let mut normalized = centered;
            for mut row in normalized.row_iter_mut() {
                row.component_mul_assign(&inv_std.transpose());
            }
            let mut out = normalized.clone();
            for mut row in out.row_iter_mut() {
                row.component_mul_assign(&scale.transpose());
                row += shift.transpose();
            }
            (out, Cache::BatchNorm { normalized, inv_std }, Some((mean, var)))
        }
    }
}

fn layer_backward(layer: &Layer, cache: Cache, grad: &DMatrix<f64>) -> (Vec<Vec<f64>>, DMatrix<f64>) {
    match (layer, cache) {
        (Layer::Dense { weights, .. }, Cache::Dense(input)) => {
            let dw = grad.transpose() * &input;
            let db = column_sums(grad);
            (vec![dw.as_slice().to_vec(), db.as_slice().to_vec()], grad * weights)
        }
        (Layer::Relu { .. }, Cache::Relu(input)) => {
            (vec![], grad.zip_map(&input, |g, x| if x > 0.0 { g } else { 0.0 }))
        }
        (Layer::BatchNorm { scale, .. }, Cache::BatchNorm { normalized, inv_std }) => {
            let b = grad.nrows() as f64;
            let dscale = DVector::from_iterator(
                grad.ncols(),
                grad.column_iter().zip(normalized.column_iter()).map(|(g, n)| g.dot(&n)),
            );
            let dshift = column_sums(grad);
            let mut dx = DMatrix::zeros(grad.nrows(), grad.ncols());
            for c in 0..grad.ncols() {
                // dxhat = dy * scale; dx = inv_std / B * (B dxhat - sum dxhat - xhat sum(dxhat xhat))
                let sum_dxhat = dshift[c] * scale[c];
                let sum_dxhat_xhat = dscale[c] * scale[c];
                for i in 0..grad.nrows() {
                    let dxhat = grad[(i, c)] * scale[c];
                    dx[(i, c)] = inv_std[c] / b * (b * dxhat - sum_dxhat - normalized[(i, c)] * sum_dxhat_xhat);
                }
            }
            (vec![dscale.as_slice().to_vec(), dshift.as_slice().to_vec()], dx)
        }
        (Layer::LinearAttention { tokens, token_dim, width, wq, bq, wk, bk, wv, bv }, Cache::Attention(input)) => {
            let (t_n, p, u) = (*tokens, *token_dim, *width);
            let mut dwq = DMatrix::zeros(u, p);
            let mut dwk = DMatrix::zeros(u, p);
            let mut dwv = DMatrix::zeros(u, p);
            let mut dbq = DVector::zeros(u);
            let mut dbk = DVector::zeros(u);
            let mut dbv = DVector::zeros(u);
            let mut dx = DMatrix::zeros(input.nrows(), input.ncols());
            for i in 0..input.nrows() {
                let row: Vec<f64> = input.row(i).iter().copied().collect();
                let a = attention_pass(&row, t_n, p, wq, bq, wk, bk, wv, bv);
                let g = DMatrix::from_fn(t_n, u, |t, c| grad[(i, t * u + c)]);
                // out = numer / denom row-wise, numer = S V, denom = S 1.
                let mut dnumer = g.clone();
                let mut ddenom = DVector::zeros(t_n);
                for t in 0..t_n {
                    let d = a.denom[t];
                    ddenom[t] = -g.row(t).dot(&a.numer.row(t)) / (d * d);
                    dnumer.row_mut(t).scale_mut(1.0 / d);
                }
                let mut dscores = &dnumer * a.v.transpose();
                for mut col in dscores.column_iter_mut() {
                    col += &ddenom;
                }
                let dv = a.scores.transpose() * &dnumer;
                let phi_q = a.q.map(feature_map);
                let phi_k = a.k.map(feature_map);
                let dq = (&dscores * &phi_k).component_mul(&a.q.map(feature_map_slope));
                let dk = (dscores.transpose() * &phi_q).component_mul(&a.k.map(feature_map_slope));
                dwq += dq.transpose() * &a.tokens;
                dwk += dk.transpose() * &a.tokens;
                dwv += dv.transpose() * &a.tokens;
                dbq += column_sums(&dq);
                dbk += column_sums(&dk);
                dbv += column_sums(&dv);
                let dtokens = &dq * wq + &dk * wk + &dv * wv;
                for t in 0..t_n {
                    for c in 0..p {
                        dx[(i, t * p + c)] = dtokens[(t, c)];
                    }
                }
            }
            let blocks = [dwq.as_slice(), dbq.as_slice(), dwk.as_slice(), dbk.as_slice(), dwv.as_slice(), dbv.as_slice()]
                .iter()
                .map(|s| s.to_vec())
                .collect();
            (blocks, dx)
        }
        _ => unreachable!("cache kind always matches its layer"),
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: FeedforwardModel,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn stack_rows(rows: &[DVector<f64>], idx: impl Iterator<Item = usize> + Clone, dim: usize) -> DMatrix<f64> {
    let n = idx.clone().count();
    let mut m = DMatrix::zeros(n, dim);
    for (r, i) in idx.enumerate() {
        m.set_row(r, &rows[i].transpose());
    }
    m
}

fn validation_loss(model: &FeedforwardModel, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    Ok(model.objective.evaluate(&model.forward_batch(x)?, y).0)
}

/// Minibatch SGD regression of `targets` (pooled codes, or one-hot labels
/// for a classification objective) from `inputs`. The last affine bias
/// starts at the mean target so that a final rectifier begins active.
#[allow(clippy::too_many_arguments)]
pub fn train_feedforward_approximator(
    inputs: &[DVector<f64>],
    targets: &[DVector<f64>],
    val_inputs: &[DVector<f64>],
    val_targets: &[DVector<f64>],
    architecture: Architecture,
    preset: Preset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if inputs.is_empty() || val_inputs.is_empty() {
        return Err(invalid("network training needs nonempty training and validation sets"));
    }
    if inputs.len() != targets.len() || val_inputs.len() != val_targets.len() {
        return Err(mismatch("inputs and targets differ in length"));
    }
    let (n_in, n_out) = (inputs[0].len(), targets[0].len());
    if inputs.iter().chain(val_inputs).any(|x| x.len() != n_in) || targets.iter().chain(val_targets).any(|t| t.len() != n_out) {
        return Err(mismatch("inputs or targets differ in length"));
    }
    let mut model = FeedforwardModel::build(architecture, preset, n_in, n_out, cfg.seed)?;
    if model.objective == Objective::Mse {
        let mean = targets.iter().fold(DVector::zeros(n_out), |acc, t| acc + t) / targets.len() as f64;
        if let Some(Layer::Dense { bias, .. }) = model.layers.iter_mut().rev().find(|l| matches!(l, Layer::Dense { .. })) {
            bias.copy_from(&mean);
        }
    }
    fit(&mut model, inputs, targets, val_inputs, val_targets, cfg)
}

/// Trains an already built model in place and returns its best state.
pub fn fit(
    model: &mut FeedforwardModel,
    inputs: &[DVector<f64>],
    targets: &[DVector<f64>],
    val_inputs: &[DVector<f64>],
    val_targets: &[DVector<f64>],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let (n_in, n_out) = (model.input_dim(), model.output_dim());
    let val_x = stack_rows(val_inputs, 0..val_inputs.len(), n_in);
    let val_y = stack_rows(val_targets, 0..val_targets.len(), n_out);
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut stop = EarlyStop::new(cfg.early_stop_patience, false);
    stop.record(validation_loss(model, &val_x, &val_y)?);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs_max {
        let order = epoch_order(inputs.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = stack_rows(inputs, batch.iter().copied(), n_in);
            let y = stack_rows(targets, batch.iter().copied(), n_out);
            let g = model.loss_and_gradients(&x, &y)?;
            if !g.loss.is_finite() || g.loss > DIVERGENCE_LOSS {
                return Err(Error::TrainingDiverged { epoch, loss: g.loss });
            }
            total += g.loss * batch.len() as f64;
            for ((param, grad), vel) in model.params_mut().into_iter().zip(&g.grads).zip(velocity.iter_mut()) {
                for ((p, &d), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = cfg.momentum * *v - cfg.learning_rate * d;
                    *p += *v;
                }
            }
            model.update_running_stats(&g.stats);
        }
        let train_loss = total / inputs.len() as f64;
        let val_loss = validation_loss(model, &val_x, &val_y)?;
        if !val_loss.is_finite() || val_loss > DIVERGENCE_LOSS {
            return Err(Error::TrainingDiverged { epoch, loss: val_loss });
        }
        log.push(epoch + 1, train_loss, val_loss);
        if stop.record(val_loss) {
            best = model.clone();
            best_epoch = epoch + 1;
        }
        if stop.should_stop() {
            break;
        }
    }
    *model = best.clone();
    Ok(TrainedModel { model: best, log, best_epoch, best_val_loss: stop.best().unwrap_or(f64::INFINITY) })
}

/// Feedforward estimate of the pooled code followed by the pooled-code
/// classifier.
#[derive(Debug, Clone)]
pub struct ApproximatorClassifier {
    pub model: FeedforwardModel,
    pub classifier: LinearClassifier,
}

impl InputClassifier for ApproximatorClassifier {
    fn predict_class(&self, x: &DVector<f64>) -> Result<usize> {
        Ok(predict_and_margin(&self.classifier, &self.model.forward(x)?)?.class)
    }
}

fn write_vec<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    for &x in v {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

/// Binary checkpoint: magic, version, architecture, objective, then each
/// layer's kind, dimensions, parameters and running statistics.
pub fn save_model(path: &Path, model: &FeedforwardModel) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u8(model.architecture.code())?;
        w.write_u8(model.objective.code())?;
        w.write_u32::<LittleEndian>(model.layers.len() as u32)?;
        for layer in &model.layers {
            match layer {
                Layer::Dense { weights, bias } => {
                    w.write_u8(0)?;
                    w.write_u64::<LittleEndian>(weights.ncols() as u64)?;
                    w.write_u64::<LittleEndian>(weights.nrows() as u64)?;
                    write_vec(&mut w, weights.as_slice())?;
                    write_vec(&mut w, bias.as_slice())?;
                }
                Layer::BatchNorm { scale, shift, running_mean, running_var } => {
                    w.write_u8(1)?;
                    w.write_u64::<LittleEndian>(scale.len() as u64)?;
                    for v in [scale, shift, running_mean, running_var] {
                        write_vec(&mut w, v.as_slice())?;
                    }
                }
                Layer::Relu { dim } => {
                    w.write_u8(2)?;
                    w.write_u64::<LittleEndian>(*dim as u64)?;
                }
                Layer::LinearAttention { tokens, token_dim, width, wq, bq, wk, bk, wv, bv } => {
                    w.write_u8(3)?;
                    for d in [tokens, token_dim, width] {
                        w.write_u64::<LittleEndian>(*d as u64)?;
                    }
                    for block in [wq.as_slice(), bq.as_slice(), wk.as_slice(), bk.as_slice(), wv.as_slice(), bv.as_slice()] {
                        write_vec(&mut w, block)?;
                    }
                }
            }
        }
        w.flush()
    })()
    .map_err(io)
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.offset, message: message.into() }
    }

    fn u8(&mut self) -> Result<u8> {
        let v = self.inner.read_u8().map_err(|_| self.fail("unexpected end of checkpoint"))?;
        self.offset += 1;
        Ok(v)
    }

    fn u32(&mut self) -> Result<u32> {
        let v = self.inner.read_u32::<LittleEndian>().map_err(|_| self.fail("unexpected end of checkpoint"))?;
        self.offset += 4;
        Ok(v)
    }

    fn dim(&mut self) -> Result<usize> {
        let v = self.inner.read_u64::<LittleEndian>().map_err(|_| self.fail("unexpected end of checkpoint"))?;
        if v == 0 || v > (1 << 32) {
            return Err(self.fail(format!("implausible layer dimension {v}")));
        }
        self.offset += 8;
        Ok(v as usize)
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; n];
        self.inner
            .read_f64_into::<LittleEndian>(&mut out)
            .map_err(|_| self.fail(format!("expected {n} parameters")))?;
        self.offset += 8 * n as u64;
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_vec(rows, cols, self.values(rows * cols)?))
    }

    fn vector(&mut self, n: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.values(n)?))
    }
}

pub fn load_model(path: &Path) -> Result<FeedforwardModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { inner: BufReader::new(file), offset: 0 };
    let mut magic = [0u8; 4];
    for b in magic.iter_mut() {
        *b = r.u8()?;
    }
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, message: "not a network checkpoint".into() });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let architecture = match r.u8()? {
        0 => Architecture::DenseShallow,
        1 => Architecture::DenseDeep,
        2 => Architecture::LinearTransformer,
        other => return Err(r.fail(format!("unknown architecture code {other}"))),
    };
    let objective = match r.u8()? {
        0 => Objective::Mse,
        1 => Objective::SoftmaxCrossEntropy,
        other => return Err(r.fail(format!("unknown objective code {other}"))),
    };
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let layer = match r.u8()? {
            0 => {
                let (input, output) = (r.dim()?, r.dim()?);
                Layer::Dense { weights: r.matrix(output, input)?, bias: r.vector(output)? }
            }
            1 => {
                let d = r.dim()?;
                Layer::BatchNorm {
                    scale: r.vector(d)?,
                    shift: r.vector(d)?,
                    running_mean: r.vector(d)?,
                    running_var: r.vector(d)?,
                }
            }
            2 => Layer::Relu { dim: r.dim()? },
            3 => {
                let (tokens, token_dim, width) = (r.dim()?, r.dim()?, r.dim()?);
                Layer::LinearAttention {
                    tokens,
                    token_dim,
                    width,
                    wq: r.matrix(width, token_dim)?,
                    bq: r.vector(width)?,
                    wk: r.matrix(width, token_dim)?,
                    bk: r.vector(width)?,
                    wv: r.matrix(width, token_dim)?,
                    bv: r.vector(width)?,
                }
            }
            other => return Err(r.fail(format!("unknown layer kind {other}"))),
        };
        layers.push(layer);
    }
    FeedforwardModel::from_layers(architecture, objective, layers)
}
