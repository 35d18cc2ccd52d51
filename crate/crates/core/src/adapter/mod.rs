//! The trainable adapter: a stack of dense blocks, each followed by batch
//! standardization with a learnable per-feature affine (γ, β) and `tanh`,
//! then a dense output layer.
//!
//! Only the affine parameters move at test time. They are exposed as one flat
//! vector ordered by depth: block 0 γ, block 0 β, block 1 γ, ... so "the last
//! α% of parameters" means the deepest normalization layers.

mod snapshot;

pub use snapshot::{read_snapshot, write_snapshot, SnapshotEncoding};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SailError};
use crate::linalg::Matrix;

/// Default standardization guard.
pub const DEFAULT_EPS_NORM: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterArchitecture {
    pub d_in: usize,
    /// Hidden width of each block, shallowest first.
    pub widths: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_eps_norm")]
    pub eps_norm: f64,
}

fn default_eps_norm() -> f64 {
    DEFAULT_EPS_NORM
}

impl AdapterArchitecture {
    pub fn new(d_in: usize, widths: Vec<usize>, classes: usize) -> Self {
        Self {
            d_in,
            widths,
            classes,
            eps_norm: DEFAULT_EPS_NORM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(SailError::Config(format!(
                "adapter needs at least 2 blocks, got {}",
                self.widths.len()
            )));
        }
        if self.d_in == 0 || self.widths.contains(&0) {
            return Err(SailError::Config("adapter widths must be positive".into()));
        }
        if self.classes < 2 {
            return Err(SailError::Config("adapter needs at least 2 classes".into()));
        }
        if !(self.eps_norm > 0.0 && self.eps_norm.is_finite()) {
            return Err(SailError::Config("eps_norm must be positive".into()));
        }
        Ok(())
    }

    /// Number of trainable scalars: `2 · Σ widths`.
    pub fn trainable_len(&self) -> usize {
        2 * self.widths.iter().sum::<usize>()
    }

    /// Depth position of every trainable scalar, in flattened order.
    pub fn depth_index(&self) -> Vec<TrainableSlot> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for (block, &w) in self.widths.iter().enumerate() {
            for kind in [AffineKind::Gamma, AffineKind::Beta] {
                for feature in 0..w {
                    out.push(TrainableSlot {
                        block,
                        kind,
                        feature,
                    });
                }
            }
        }
        out
    }

    /// Flattened index range occupied by `block`.
    pub fn block_range(&self, block: usize) -> std::ops::Range<usize> {
        let start = 2 * self.widths[..block].iter().sum::<usize>();
        start..start + 2 * self.widths[block]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AffineKind {
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainableSlot {
    pub block: usize,
    pub kind: AffineKind,
    pub feature: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    /// `width × fan_in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Frozen dense weights plus trainable affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    arch: AdapterArchitecture,
    pub(crate) blocks: Vec<DenseBlock>,
    pub(crate) out_weight: Matrix,
    pub(crate) out_bias: Vec<f64>,
    pub(crate) gamma: Vec<Vec<f64>>,
    pub(crate) beta: Vec<Vec<f64>>,
}

/// Trainable vector captured when source pretraining finished.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSnapshot(Vec<f64>);

impl SourceSnapshot {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl AdapterParams {
    /// Scaled-normal dense weights, zero biases, identity affine.
    pub fn init(arch: &AdapterArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = arch.d_in;
        let mut blocks = Vec::with_capacity(arch.widths.len());
        for &w in &arch.widths {
            blocks.push(DenseBlock {
                weight: Matrix::random_normal(w, fan_in, (1.0 / fan_in as f64).sqrt(), &mut rng),
                bias: vec![0.0; w],
            });
            fan_in = w;
        }
        let out_weight = Matrix::random_normal(arch.classes, fan_in, (1.0 / fan_in as f64).sqrt(), &mut rng);
        Ok(Self {
            arch: arch.clone(),
            blocks,
            out_weight,
            out_bias: vec![0.0; arch.classes],
            gamma: arch.widths.iter().map(|&w| vec![1.0; w]).collect(),
            beta: arch.widths.iter().map(|&w| vec![0.0; w]).collect(),
        })
    }

    pub fn architecture(&self) -> &AdapterArchitecture {
        &self.arch
    }

    pub fn blocks(&self) -> &[DenseBlock] {
        &self.blocks
    }

    pub fn out_weight(&self) -> &Matrix {
        &self.out_weight
    }

    pub fn out_bias(&self) -> &[f64] {
        &self.out_bias
    }

    /// Trainable vector in depth order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.arch.trainable_len());
        for (g, b) in self.gamma.iter().zip(&self.beta) {
            v.extend_from_slice(g);
            v.extend_from_slice(b);
        }
        v
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.arch.trainable_len() {
            return Err(SailError::invalid(format!(
                "trainable vector has length {}, expected {}",
                values.len(),
                self.arch.trainable_len()
            )));
        }
        let mut off = 0;
        for (g, b) in self.gamma.iter_mut().zip(self.beta.iter_mut()) {
            let w = g.len();
            g.copy_from_slice(&values[off..off + w]);
            b.copy_from_slice(&values[off + w..off + 2 * w]);
            off += 2 * w;
        }
        Ok(())
    }

    /// Every frozen scalar in storage order (block weights and biases, then
    /// the output layer).
    pub fn frozen_values(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend_from_slice(b.weight.as_slice());
            v.extend_from_slice(&b.bias);
        }
        v.extend_from_slice(self.out_weight.as_slice());
        v.extend_from_slice(&self.out_bias);
        v
    }

    pub fn snapshot(&self) -> SourceSnapshot {
        SourceSnapshot(self.flatten())
    }

    /// `trainable ← trainable − lr · grads`. Frozen weights are untouched.
    pub fn sgd_step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != self.arch.trainable_len() {
            return Err(SailError::invalid("gradient length mismatch"));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(SailError::invalid(format!("learning rate {lr} must be finite and >= 0")));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(SailError::NumericalFailure {
                step: 0,
                context: "non-finite adapter gradient".into(),
            });
        }
        let mut theta = self.flatten();
        for (t, g) in theta.iter_mut().zip(grads) {
            *t -= lr * g;
        }
        self.unflatten(&theta)
    }
}

/// Activations kept by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    /// Pre-standardization activations `W h + b`.
    pre: Matrix,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    /// Standardized activations.
    normalized: Matrix,
    /// Output after affine and `tanh`.
    out: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Batch mean and population variance of block `l`'s pre-activations.
    pub fn block_stats(&self, l: usize) -> (&[f64], &[f64]) {
        (&self.blocks[l].mean, &self.blocks[l].var)
    }

    /// Standardized pre-activations of block `l`.
    pub fn block_normalized(&self, l: usize) -> &Matrix {
        &self.blocks[l].normalized
    }

    /// Post-activation output of block `l`.
    pub fn block_output(&self, l: usize) -> &Matrix {
        &self.blocks[l].out
    }
}

/// Logits for a batch (`n × d_in`, `n ≥ 2`) using batch statistics.
pub fn forward(params: &AdapterParams, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
    let arch = &params.arch;
    if batch.rows() < 2 {
        return Err(SailError::InvalidBatch(format!(
            "batch standardization needs at least 2 samples, got {}",
            batch.rows()
        )));
    }
    if batch.cols() != arch.d_in {
        return Err(SailError::InvalidBatch(format!(
            "batch has {} features, adapter expects {}",
            batch.cols(),
            arch.d_in
        )));
    }
    let n = batch.rows() as f64;
    let mut h = batch.clone();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for (l, block) in params.blocks.iter().enumerate() {
        let mut pre = h.matmul_t(&block.weight);
        pre.add_row_vector(&block.bias);
        let mean: Vec<f64> = pre.column_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; pre.cols()];
        for i in 0..pre.rows() {
            for (j, x) in pre.row(i).iter().enumerate() {
                let d = x - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + arch.eps_norm).sqrt()).collect();
        let mut normalized = pre.clone();
        let mut out = Matrix::zeros(pre.rows(), pre.cols());
        for i in 0..pre.rows() {
            let xr = normalized.row_mut(i);
            for j in 0..xr.len() {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let or = out.row_mut(i);
            for j in 0..or.len() {
                or[j] = (params.gamma[l][j] * xr[j] + params.beta[l][j]).tanh();
            }
        }
        h = out.clone();
        caches.push(BlockCache {
            pre,
            mean,
            var,
            inv_std,
            normalized,
            out,
        });
    }
    let mut logits = h.matmul_t(&params.out_weight);
    logits.add_row_vector(&params.out_bias);
    Ok((
        logits,
        ForwardCache {
            input: batch.clone(),
            blocks: caches,
        },
    ))
}

/// Gradients for every parameter, used by source pretraining.
#[derive(Debug, Clone)]
pub(crate) struct FullGradients {
    pub trainable: Vec<f64>,
    pub blocks: Vec<(Matrix, Vec<f64>)>,
    pub out_weight: Matrix,
    pub out_bias: Vec<f64>,
}

fn check_upstream(params: &AdapterParams, cache: &ForwardCache, d_logits: &Matrix) -> Result<()> {
    if d_logits.rows() != cache.batch_size() || d_logits.cols() != params.arch.classes {
        return Err(SailError::invalid(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            d_logits.rows(),
            d_logits.cols(),
            cache.batch_size(),
            params.arch.classes
        )));
    }
    if cache.blocks.len() != params.blocks.len() {
        return Err(SailError::invalid("cache does not match adapter depth"));
    }
    Ok(())
}

/// Reverse-mode gradient of a scalar loss with respect to the trainable
/// affine parameters, given `∂loss/∂logits`. Batch statistics are
/// differentiated through.
pub fn backward(params: &AdapterParams, cache: &ForwardCache, d_logits: &Matrix) -> Result<Vec<f64>> {
    check_upstream(params, cache, d_logits)?;
    Ok(backward_impl(params, cache, d_logits, false).trainable)
}

pub(crate) fn backward_full(params: &AdapterParams, cache: &ForwardCache, d_logits: &Matrix) -> Result<FullGradients> {
    check_upstream(params, cache, d_logits)?;
    Ok(backward_impl(params, cache, d_logits, true))
}

fn backward_impl(params: &AdapterParams, cache: &ForwardCache, d_logits: &Matrix, frozen: bool) -> FullGradients {
    let arch = &params.arch;
    let n = cache.batch_size() as f64;
    let depth = params.blocks.len();
    let last_out = &cache.blocks[depth - 1].out;
    let (out_weight, out_bias) = if frozen {
        (d_logits.t_matmul(last_out), d_logits.column_sums())
    } else {
        (Matrix::zeros(0, 0), Vec::new())
    };
    let mut g_act = d_logits.matmul(&params.out_weight);
    let mut trainable_rev: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(depth);
    let mut block_grads = Vec::with_capacity(depth);
    for l in (0..depth).rev() {
        let bc = &cache.blocks[l];
        let width = bc.pre.cols();
        let gamma = &params.gamma[l];
        let mut d_gamma = vec![0.0; width];
        let mut d_beta = vec![0.0; width];
        // g_xhat = g_y ⊙ γ, with g_y = g_act ⊙ (1 − tanh²)
        let mut g_xhat = Matrix::zeros(bc.pre.rows(), width);
        for i in 0..bc.pre.rows() {
            let a = bc.out.row(i);
            let xh = bc.normalized.row(i);
            let ga = g_act.row(i);
            let gx = g_xhat.row_mut(i);
            for j in 0..width {
                let gy = ga[j] * (1.0 - a[j] * a[j]);
                d_gamma[j] += gy * xh[j];
                d_beta[j] += gy;
                gx[j] = gy * gamma[j];
            }
        }
        trainable_rev.push((d_gamma, d_beta));
        if l == 0 && !frozen {
            break;
        }
        let mean_g: Vec<f64> = g_xhat.column_sums().into_iter().map(|s| s / n).collect();
        let mut mean_gx = vec![0.0; width];
        for i in 0..bc.pre.rows() {
            for (j, (g, x)) in g_xhat.row(i).iter().zip(bc.normalized.row(i)).enumerate() {
                mean_gx[j] += g * x;
            }
        }
        mean_gx.iter_mut().for_each(|v| *v /= n);
        let mut g_pre = g_xhat;
        for i in 0..g_pre.rows() {
            let xh = bc.normalized.row(i).to_vec();
            let gp = g_pre.row_mut(i);
            for j in 0..width {
                gp[j] = bc.inv_std[j] * (gp[j] - mean_g[j] - xh[j] * mean_gx[j]);
            }
        }
        if frozen {
            let input = if l == 0 { &cache.input } else { &cache.blocks[l - 1].out };
            block_grads.push((g_pre.t_matmul(input), g_pre.column_sums()));
        }
        if l > 0 {
            g_act = g_pre.matmul(&params.blocks[l].weight);
        }
    }
    let mut trainable = Vec::with_capacity(arch.trainable_len());
    for (g, b) in trainable_rev.into_iter().rev() {
        trainable.extend(g);
        trainable.extend(b);
    }
    block_grads.reverse();
    FullGradients {
        trainable,
        blocks: block_grads,
        out_weight,
        out_bias,
    }
}

/// Labeled samples used for source pretraining.
#[derive(Debug, Clone)]
pub struct LabeledData {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.1,
            batch_size: 64,
        }
    }
}

/// Mean softmax cross-entropy against hard labels, and its gradient.
pub(crate) fn hard_label_ce(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let logp = crate::fusion::log_softmax_raw(logits.row(i));
        loss -= logp[y];
        let g = grad.row_mut(i);
        for (c, lp) in logp.iter().enumerate() {
            g[c] = (lp.exp() - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / n, grad)
}

/// Supervised source training of every parameter by minibatch SGD, after
/// which the dense weights are frozen and the affine vector is snapshotted.
pub fn pretrain(
    arch: &AdapterArchitecture,
    data: &LabeledData,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(AdapterParams, SourceSnapshot)> {
    let mut params = AdapterParams::init(arch, seed)?;
    if data.features.rows() != data.labels.len() {
        return Err(SailError::invalid("features and labels differ in length"));
    }
    if data.labels.iter().any(|&y| y >= arch.classes) {
        return Err(SailError::invalid("label out of range"));
    }
    let bs = config.batch_size.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_50_u64);
    let mut order: Vec<usize> = (0..data.labels.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let x = data.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (logits, cache) = forward(&params, &x)?;
            let (loss, d_logits) = hard_label_ce(&logits, &y);
            if !loss.is_finite() {
                return Err(SailError::PretrainingFailure { epoch, loss });
            }
            epoch_loss += loss;
            batches += 1;
            let g = backward_full(&params, &cache, &d_logits)?;
            apply_full_step(&mut params, &g, config.lr);
        }
        let params_finite = params.frozen_values().iter().chain(&params.flatten()).all(|x| x.is_finite());
        if !params_finite || (batches > 0 && !(epoch_loss / batches as f64).is_finite()) {
            return Err(SailError::PretrainingFailure {
                epoch,
                loss: epoch_loss,
            });
        }
    }
    let snapshot = params.snapshot();
    Ok((params, snapshot))
}

fn apply_full_step(params: &mut AdapterParams, g: &FullGradients, lr: f64) {
    for (block, (gw, gb)) in params.blocks.iter_mut().zip(&g.blocks) {
        for (w, d) in block.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *w -= lr * d;
        }
        for (b, d) in block.bias.iter_mut().zip(gb) {
            *b -= lr * d;
        }
    }
    for (w, d) in params.out_weight.as_mut_slice().iter_mut().zip(g.out_weight.as_slice()) {
        *w -= lr * d;
    }
    for (b, d) in params.out_bias.iter_mut().zip(&g.out_bias) {
        *b -= lr * d;
    }
    let mut theta = params.flatten();
    for (t, d) in theta.iter_mut().zip(&g.trainable) {
        *t -= lr * d;
    }
    params
        .unflatten(&theta)
        .expect("trainable length is fixed by the architecture");
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| crate::linalg::argmax(logits.row(*i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}
