//! Minibatch training with straight-through quantizers, plus the three
//! sparsification strategies: a-priori fixed masks, iterative magnitude
//! pruning, and per-neuron momentum prune/regrow.
//!
//! Quantizers forward exact grid values but backpropagate as clamps: the
//! gradient passes untouched wherever the input sits inside the quantizer's
//! active range (inclusive) and is zero outside. Masked weights stay exactly
//! zero at every step; gradients for off-mask positions are only ever
//! accumulated to feed the momentum pruner, never applied.

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::layers::{argmax, quantize_weight, BatchNorm, LayerParams, Model};
use crate::quantizer::{quantize, ste_gate, QuantizerParams};
use crate::topology::{ConnectivityMask, LayerKind};

/// Exponential smoothing constant for the pruning momentum.
pub const DEFAULT_MOMENTUM_ALPHA: f64 = 0.9;
/// Running-statistics update rate for batch norm.
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerParams {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        OptimizerParams { kind: OptimizerKind::Sgd { momentum: 0.9 }, learning_rate: 0.01 }
    }
}

impl OptimizerParams {
    pub fn adam() -> Self {
        OptimizerParams {
            kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 },
            learning_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy against integer class labels; train-time only,
    /// never part of the compiled circuit.
    SoftmaxCrossEntropy,
    /// Mean squared error against real target vectors.
    MeanSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityStrategy {
    /// Masks fixed at initialization and never touched.
    Apriori,
    /// Start fully connected, remove the smallest weights at each event
    /// until every neuron is down to the target fan-in. Pruned positions
    /// never come back.
    Iterative,
    /// Keep fan-in constant: each event prunes the smallest weights per
    /// neuron and regrows the same number of positions by gradient momentum.
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneSchedule {
    pub strategy: SparsityStrategy,
    /// Fraction of each neuron's fan-in turned over per event (recorded for
    /// analysis; `prune_count`/`regrow_count` are what the steps execute).
    pub prune_rate: f64,
    /// Fan-in every neuron holds (momentum) or ends at (iterative).
    pub target_fan_in: u32,
    /// Optimizer steps between prune events; 0 disables events.
    pub steps_between: usize,
    /// Per-neuron positions pruned at each event (P1).
    pub prune_count: usize,
    /// Per-neuron positions regrown at each event (R1).
    pub regrow_count: usize,
}

impl PruneSchedule {
    pub fn apriori() -> Self {
        PruneSchedule {
            strategy: SparsityStrategy::Apriori,
            prune_rate: 0.0,
            target_fan_in: 0,
            steps_between: 0,
            prune_count: 0,
            regrow_count: 0,
        }
    }

    /// Momentum schedule turning over `rate` of the fan-in per event.
    pub fn momentum(rate: f64, target_fan_in: u32, steps_between: usize) -> Self {
        let count = ((rate * target_fan_in as f64).round() as usize).min(target_fan_in as usize);
        PruneSchedule {
            strategy: SparsityStrategy::Momentum,
            prune_rate: rate,
            target_fan_in,
            steps_between,
            prune_count: count,
            regrow_count: count,
        }
    }

    pub fn iterative(target_fan_in: u32, steps_between: usize) -> Self {
        PruneSchedule {
            strategy: SparsityStrategy::Iterative,
            prune_rate: 0.0,
            target_fan_in,
            steps_between,
            prune_count: 0,
            regrow_count: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prune_rate) {
            return Err(Error::InvalidArg(format!(
                "prune rate must be in [0, 1], got {}",
                self.prune_rate
            )));
        }
        match self.strategy {
            SparsityStrategy::Apriori => Ok(()),
            SparsityStrategy::Momentum => {
                if self.prune_count != self.regrow_count {
                    return Err(Error::InvalidArg(format!(
                        "momentum pruning preserves fan-in: prune count {} must equal regrow count {}",
                        self.prune_count, self.regrow_count
                    )));
                }
                if self.prune_count > self.target_fan_in as usize {
                    return Err(Error::InvalidArg(format!(
                        "cannot prune {} of {} in-mask positions",
                        self.prune_count, self.target_fan_in
                    )));
                }
                Ok(())
            }
            SparsityStrategy::Iterative => {
                if self.target_fan_in == 0 {
                    return Err(Error::InvalidArg("target fan-in must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

/// Training targets: class labels for cross-entropy, real vectors for MSE.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [u32]),
    Values(&'a [Vec<f64>]),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(l) => l.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerParams,
    pub schedule: PruneSchedule,
    pub loss: LossKind,
    /// Compute the loss on the final layer's quantized outputs (gradient via
    /// the straight-through gate) rather than its raw pre-quantizer values.
    pub loss_on_quantized: bool,
    /// Use stored running statistics and keep batch-norm parameters fixed.
    pub freeze_batchnorm: bool,
    /// Smoothing constant for the pruning momentum.
    pub momentum_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerParams::default(),
            schedule: PruneSchedule::apriori(),
            loss: LossKind::SoftmaxCrossEntropy,
            loss_on_quantized: true,
            freeze_batchnorm: false,
            momentum_alpha: DEFAULT_MOMENTUM_ALPHA,
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Batch forward/backward

/// How quantizers evaluate in the forward pass. `Exact` snaps to the grid
/// (training and inference); `Surrogate` evaluates the straight-through
/// surrogate (a clamp onto the active range) so the loss is differentiable —
/// the analytic backward pass is identical for both, which is the STE
/// contract finite differences can check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum QuantMode {
    Exact,
    /// Only the finite-difference gradient checks evaluate this mode.
    #[cfg_attr(not(test), allow(dead_code))]
    Surrogate,
}

fn apply_quant(x: f64, p: &QuantizerParams, mode: QuantMode) -> f64 {
    match mode {
        QuantMode::Exact => quantize(x, p),
        QuantMode::Surrogate => {
            let (lo, hi) = p.active_range();
            x.clamp(lo, hi)
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Grads {
    pub weights: Vec<Vec<Vec<f64>>>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros_like(model: &Model) -> Grads {
        let mut weights = Vec::with_capacity(model.layers.len());
        let mut gamma = Vec::with_capacity(model.layers.len());
        let mut beta = Vec::with_capacity(model.layers.len());
        for params in &model.layers {
            let (w, bn) = match params {
                LayerParams::SparseLinear { weights, bn, .. } => (weights, bn),
                LayerParams::DenseQuantLinear { weights, bn } => (weights, bn),
                LayerParams::SparseConv(_) => unreachable!("rejected before training"),
            };
            weights.push(w.iter().map(|row| vec![0.0; row.len()]).collect());
            gamma.push(vec![0.0; bn.gamma.len()]);
            beta.push(vec![0.0; bn.beta.len()]);
        }
        Grads { weights, gamma, beta }
    }
}

struct LayerPass {
    /// Concatenated quantized input rows for this layer (one per sample).
    x: Vec<Vec<f64>>,
    /// Normalized pre-affine values (batch mode) for γ gradients.
    z_hat: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    /// Post-batch-norm raw outputs.
    y: Vec<Vec<f64>>,
    /// Quantized outputs (mode-dependent).
    q: Vec<Vec<f64>>,
    gate: Vec<Vec<bool>>,
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

pub(crate) struct BatchPass {
    pub loss: f64,
    pub grads: Grads,
    /// Per layer: batch mean and biased variance, when batch statistics ran.
    pub batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    /// Quantized-argmax hits against class labels (0 for value targets).
    pub correct: usize,
}

fn layer_weight_view<'m>(params: &'m LayerParams) -> (&'m [Vec<f64>], Option<&'m ConnectivityMask>, &'m BatchNorm) {
    match params {
        LayerParams::SparseLinear { weights, mask, bn } => (weights, Some(mask), bn),
        LayerParams::DenseQuantLinear { weights, bn } => (weights, None, bn),
        LayerParams::SparseConv(_) => unreachable!("rejected before training"),
    }
}

/// One pure batch pass: loss, parameter gradients, batch statistics, and
/// quantized-argmax hit count. Never mutates the model; running-statistics
/// updates are the caller's job so this stays a pure function of its inputs
/// (finite differences depend on that).
pub(crate) fn loss_and_grads(
    model: &Model,
    batch: &[usize],
    features: &[Vec<f64>],
    targets: &Targets<'_>,
    cfg: &TrainConfig,
    mode: QuantMode,
    dense_grads: bool,
) -> Result<BatchPass> {
    let b = batch.len();
    debug_assert!(b > 0);
    let spec = &model.spec;
    let in_params = spec.layers[0].in_params();
    let input_q: Vec<Vec<f64>> = batch
        .iter()
        .map(|&s| features[s].iter().map(|&v| apply_quant(v, &in_params, mode)).collect())
        .collect();

    // Forward, caching everything the backward pass needs.
    let mut passes: Vec<LayerPass> = Vec::with_capacity(model.layers.len());
    for (i, (layer, params)) in spec.layers.iter().zip(&model.layers).enumerate() {
        let (weights, mask, bn) = layer_weight_view(params);
        let dense_q: Vec<Vec<f64>>;
        let effective: &[Vec<f64>] = if let LayerParams::DenseQuantLinear { weights, .. } = params {
            let wq = spec.layers[i].weight_bit_width.expect("validated");
            let mw = spec.layers[i].max_val_weight.expect("validated");
            dense_q = weights
                .iter()
                .map(|row| row.iter().map(|&w| quantize_weight(w, wq, mw)).collect())
                .collect();
            &dense_q
        } else {
            weights
        };
        // Assemble the layer input: main path then skip sources, per sample.
        let x: Vec<Vec<f64>> = (0..b)
            .map(|s| {
                let mut row: Vec<f64> = if i == 0 {
                    input_q[s].clone()
                } else {
                    passes[i - 1].q[s].clone()
                };
                for src in spec.skip_sources_into(i) {
                    row.extend_from_slice(&passes[src].q[s]);
                }
                row
            })
            .collect();
        let neurons = layer.neurons;
        let mut z = vec![vec![0.0; neurons]; b];
        for s in 0..b {
            for n in 0..neurons {
                z[s][n] = match mask {
                    Some(m) => crate::layers::sparse_dot(&effective[n], &m.rows[n], &x[s]),
                    None => effective[n].iter().zip(&x[s]).map(|(w, v)| w * v).sum(),
                };
            }
        }
        let mut y = vec![vec![0.0; neurons]; b];
        let mut z_hat = vec![vec![0.0; neurons]; b];
        let mut inv_std = vec![0.0; neurons];
        let batch_stats = if cfg.freeze_batchnorm {
            for n in 0..neurons {
                inv_std[n] = 1.0 / (bn.running_var[n] + bn.epsilon[n]).sqrt();
                for s in 0..b {
                    z_hat[s][n] = (z[s][n] - bn.running_mean[n]) * inv_std[n];
                    y[s][n] = bn.apply(n, z[s][n]);
                }
            }
            None
        } else {
            let mut mean = vec![0.0; neurons];
            let mut var = vec![0.0; neurons];
            for n in 0..neurons {
                let mu = z.iter().map(|r| r[n]).sum::<f64>() / b as f64;
                let v = z.iter().map(|r| (r[n] - mu).powi(2)).sum::<f64>() / b as f64;
                mean[n] = mu;
                var[n] = v;
                inv_std[n] = 1.0 / (v + bn.epsilon[n]).sqrt();
                for s in 0..b {
                    z_hat[s][n] = (z[s][n] - mu) * inv_std[n];
                    y[s][n] = bn.gamma[n] * z_hat[s][n] + bn.beta[n];
                }
            }
            Some((mean, var))
        };
        let out_params = layer.out_params();
        let mut q = vec![vec![0.0; neurons]; b];
        let mut gate = vec![vec![false; neurons]; b];
        for s in 0..b {
            for n in 0..neurons {
                q[s][n] = apply_quant(y[s][n], &out_params, mode);
                gate[s][n] = ste_gate(y[s][n], &out_params);
            }
        }
        passes.push(LayerPass { x, z_hat, inv_std, y, q, gate, batch_stats });
    }

    // Loss and its gradient on the training logits.
    let last = passes.last().expect("models have at least one layer");
    let out_width = spec.layers.last().unwrap().neurons;
    let logits: &Vec<Vec<f64>> = if cfg.loss_on_quantized { &last.q } else { &last.y };
    let mut dlogits = vec![vec![0.0; out_width]; b];
    let mut loss = 0.0;
    let mut correct = 0;
    match (cfg.loss, targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            for (s, &sample) in batch.iter().enumerate() {
                let t = labels[sample] as usize;
                let row = &logits[s];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&l| (l - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                loss += sum.ln() - (row[t] - m);
                for k in 0..out_width {
                    dlogits[s][k] = (exps[k] / sum - ((k == t) as u8 as f64)) / b as f64;
                }
                if argmax(&last.q[s]) == t {
                    correct += 1;
                }
            }
            loss /= b as f64;
        }
        (LossKind::MeanSquared, Targets::Values(values)) => {
            let denom = (b * out_width) as f64;
            for (s, &sample) in batch.iter().enumerate() {
                let t = &values[sample];
                if t.len() != out_width {
                    return Err(Error::InvalidArg(format!(
                        "target vector has {} entries, model outputs {out_width}",
                        t.len()
                    )));
                }
                for k in 0..out_width {
                    let d = logits[s][k] - t[k];
                    loss += d * d / denom;
                    dlogits[s][k] = 2.0 * d / denom;
                }
            }
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Values(_)) => {
            return Err(Error::InvalidArg(
                "cross-entropy needs class labels, not value targets".into(),
            ));
        }
        (LossKind::MeanSquared, Targets::Classes(_)) => {
            return Err(Error::InvalidArg(
                "mean-squared loss needs value targets, not class labels".into(),
            ));
        }
    }

    // Backward.
    let mut grads = Grads::zeros_like(model);
    // Gradient w.r.t. each layer's quantized output, accumulated across its
    // consumers (main path and skips).
    let mut dq: Vec<Vec<Vec<f64>>> =
        model.layers.iter().enumerate().map(|(i, _)| vec![vec![0.0; spec.layers[i].neurons]; b]).collect();
    let li = model.layers.len() - 1;
    if cfg.loss_on_quantized {
        dq[li] = std::mem::take(&mut dlogits);
    }
    for i in (0..model.layers.len()).rev() {
        let layer = &spec.layers[i];
        let (weights, mask, bn) = layer_weight_view(&model.layers[i]);
        let pass = &passes[i];
        let neurons = layer.neurons;
        // Through the output quantizer's straight-through gate; the final
        // layer may also take the loss gradient directly on its raw output.
        let mut dy = vec![vec![0.0; neurons]; b];
        for s in 0..b {
            for n in 0..neurons {
                dy[s][n] = if pass.gate[s][n] { dq[i][s][n] } else { 0.0 };
            }
        }
        if i == li && !cfg.loss_on_quantized {
            for s in 0..b {
                for n in 0..neurons {
                    dy[s][n] += dlogits[s][n];
                }
            }
        }
        // Batch norm backward. Frozen statistics decouple the samples; the
        // γ and β gradients are still reported (the optimizer is what skips
        // them when they are held fixed).
        let mut dz = vec![vec![0.0; neurons]; b];
        if cfg.freeze_batchnorm {
            for n in 0..neurons {
                grads.gamma[i][n] = (0..b).map(|s| dy[s][n] * pass.z_hat[s][n]).sum();
                grads.beta[i][n] = (0..b).map(|s| dy[s][n]).sum();
                let scale = bn.gamma[n] * pass.inv_std[n];
                for s in 0..b {
                    dz[s][n] = dy[s][n] * scale;
                }
            }
        } else {
            for n in 0..neurons {
                let sum_dy: f64 = (0..b).map(|s| dy[s][n]).sum();
                let sum_dy_zh: f64 = (0..b).map(|s| dy[s][n] * pass.z_hat[s][n]).sum();
                grads.gamma[i][n] = sum_dy_zh;
                grads.beta[i][n] = sum_dy;
                let scale = bn.gamma[n] * pass.inv_std[n];
                for s in 0..b {
                    dz[s][n] = scale
                        * (dy[s][n]
                            - sum_dy / b as f64
                            - pass.z_hat[s][n] * sum_dy_zh / b as f64);
                }
            }
        }
        // Weight gradients and input gradients.
        let width = pass.x.first().map_or(0, Vec::len);
        let mut dx = vec![vec![0.0; width]; b];
        match mask {
            Some(m) => {
                for n in 0..neurons {
                    if dense_grads {
                        for j in 0..width {
                            grads.weights[i][n][j] =
                                (0..b).map(|s| dz[s][n] * pass.x[s][j]).sum();
                        }
                    } else {
                        for &j in &m.rows[n] {
                            grads.weights[i][n][j] =
                                (0..b).map(|s| dz[s][n] * pass.x[s][j]).sum();
                        }
                    }
                    for &j in &m.rows[n] {
                        for s in 0..b {
                            dx[s][j] += dz[s][n] * weights[n][j];
                        }
                    }
                }
            }
            None => {
                // Dense layer: the forward ran on quantized weights; the
                // gradient reaches the master weights through the weight
                // quantizer's own straight-through gate.
                let wq = layer.weight_bit_width.expect("validated");
                let mw = layer.max_val_weight.expect("validated");
                for n in 0..neurons {
                    for j in 0..width {
                        let g: f64 = (0..b).map(|s| dz[s][n] * pass.x[s][j]).sum();
                        grads.weights[i][n][j] =
                            if crate::layers::weight_ste_gate(weights[n][j], mw) { g } else { 0.0 };
                        let wqv = quantize_weight(weights[n][j], wq, mw);
                        for s in 0..b {
                            dx[s][j] += dz[s][n] * wqv;
                        }
                    }
                }
            }
        }
        // Route the input gradient back to its producers.
        let main_width = spec.main_feature_count_in(i)?;
        if i > 0 {
            for s in 0..b {
                for (j, v) in dx[s][..main_width].iter().enumerate() {
                    dq[i - 1][s][j] += v;
                }
            }
        }
        let mut offset = main_width;
        for src in spec.skip_sources_into(i) {
            let w = spec.layers[src].neurons;
            for s in 0..b {
                for j in 0..w {
                    dq[src][s][j] += dx[s][offset + j];
                }
            }
            offset += w;
        }
    }

    Ok(BatchPass {
        loss,
        grads,
        batch_stats: passes.into_iter().map(|p| p.batch_stats).collect(),
        correct,
    })
}

// ---------------------------------------------------------------------------
// Optimizers

struct OptState {
    t: u64,
    w_m: Vec<Vec<Vec<f64>>>,
    w_v: Vec<Vec<Vec<f64>>>,
    g_m: Vec<Vec<f64>>,
    g_v: Vec<Vec<f64>>,
    b_m: Vec<Vec<f64>>,
    b_v: Vec<Vec<f64>>,
}

impl OptState {
    fn new(model: &Model) -> OptState {
        let g = Grads::zeros_like(model);
        OptState {
            t: 0,
            w_m: g.weights.clone(),
            w_v: g.weights,
            g_m: g.gamma.clone(),
            g_v: g.gamma,
            b_m: g.beta.clone(),
            b_v: g.beta,
        }
    }

    /// Forget history at a weight position whose mask membership changed.
    fn reset_weight(&mut self, l: usize, n: usize, j: usize) {
        self.w_m[l][n][j] = 0.0;
        self.w_v[l][n][j] = 0.0;
    }
}

fn optimizer_delta(
    params: &OptimizerParams,
    t: u64,
    m: &mut f64,
    v: &mut f64,
    g: f64,
) -> f64 {
    match params.kind {
        OptimizerKind::Sgd { momentum } => {
            *m = momentum * *m + g;
            params.learning_rate * *m
        }
        OptimizerKind::Adam { beta1, beta2, epsilon } => {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mh = *m / (1.0 - beta1.powi(t as i32));
            let vh = *v / (1.0 - beta2.powi(t as i32));
            params.learning_rate * mh / (vh.sqrt() + epsilon)
        }
    }
}

fn optimizer_step(
    model: &mut Model,
    grads: &Grads,
    state: &mut OptState,
    params: &OptimizerParams,
    freeze_bn: bool,
) {
    state.t += 1;
    let t = state.t;
    for (l, layer) in model.layers.iter_mut().enumerate() {
        match layer {
            LayerParams::SparseLinear { weights, mask, bn } => {
                for (n, row) in mask.rows.iter().enumerate() {
                    for &j in row {
                        let d = optimizer_delta(
                            params,
                            t,
                            &mut state.w_m[l][n][j],
                            &mut state.w_v[l][n][j],
                            grads.weights[l][n][j],
                        );
                        weights[n][j] -= d;
                    }
                }
                if !freeze_bn {
                    bn_step(bn, grads, state, params, t, l);
                }
            }
            LayerParams::DenseQuantLinear { weights, bn } => {
                for n in 0..weights.len() {
                    for j in 0..weights[n].len() {
                        let d = optimizer_delta(
                            params,
                            t,
                            &mut state.w_m[l][n][j],
                            &mut state.w_v[l][n][j],
                            grads.weights[l][n][j],
                        );
                        weights[n][j] -= d;
                    }
                }
                if !freeze_bn {
                    bn_step(bn, grads, state, params, t, l);
                }
            }
            LayerParams::SparseConv(_) => unreachable!("rejected before training"),
        }
    }
}

fn bn_step(
    bn: &mut BatchNorm,
    grads: &Grads,
    state: &mut OptState,
    params: &OptimizerParams,
    t: u64,
    l: usize,
) {
    for n in 0..bn.gamma.len() {
        let d = optimizer_delta(params, t, &mut state.g_m[l][n], &mut state.g_v[l][n], grads.gamma[l][n]);
        bn.gamma[n] -= d;
        let d = optimizer_delta(params, t, &mut state.b_m[l][n], &mut state.b_v[l][n], grads.beta[l][n]);
        bn.beta[n] -= d;
    }
}

fn update_running_stats(model: &mut Model, stats: &[Option<(Vec<f64>, Vec<f64>)>], batch: usize) {
    for (layer, stat) in model.layers.iter_mut().zip(stats) {
        let Some((mean, var)) = stat else { continue };
        let bn = match layer {
            LayerParams::SparseLinear { bn, .. } => bn,
            LayerParams::DenseQuantLinear { bn, .. } => bn,
            LayerParams::SparseConv(_) => unreachable!("rejected before training"),
        };
        // Running variance tracks the unbiased estimate (biased when the
        // batch is a single sample and no unbiased estimate exists).
        let factor = if batch > 1 { batch as f64 / (batch as f64 - 1.0) } else { 1.0 };
        for n in 0..bn.gamma.len() {
            bn.running_mean[n] = (1.0 - BN_MOMENTUM) * bn.running_mean[n] + BN_MOMENTUM * mean[n];
            bn.running_var[n] =
                (1.0 - BN_MOMENTUM) * bn.running_var[n] + BN_MOMENTUM * var[n] * factor;
        }
    }
}

// ---------------------------------------------------------------------------
// Momentum pruning

/// Exponentially smoothed per-weight gradients plus the per-layer summary
/// statistics of the pruning algorithm's first phase.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub alpha: f64,
    /// Dense smoothed-gradient matrices for sparse linear layers, `None`
    /// elsewhere. Off-mask entries accumulate between prune events (they
    /// decide regrowth) and are zeroed when each event completes.
    pub m: Vec<Option<Vec<Vec<f64>>>>,
    pub mean_momentum: Vec<f64>,
    pub total_momentum: f64,
    pub non_zero: Vec<usize>,
    pub total_non_zero: usize,
}

impl MomentumState {
    pub fn new(model: &Model, alpha: f64) -> MomentumState {
        let m = model
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::SparseLinear { weights, .. } => {
                    Some(weights.iter().map(|r| vec![0.0; r.len()]).collect())
                }
                _ => None,
            })
            .collect();
        MomentumState {
            alpha,
            m,
            mean_momentum: vec![0.0; model.layers.len()],
            total_momentum: 0.0,
            non_zero: vec![0; model.layers.len()],
            total_non_zero: 0,
        }
    }

    pub(crate) fn update(&mut self, grads: &Grads) {
        for (l, m) in self.m.iter_mut().enumerate() {
            let Some(m) = m else { continue };
            for (n, row) in m.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = self.alpha * *v + (1.0 - self.alpha) * grads.weights[l][n][j];
                }
            }
        }
    }

    /// Phase-1 statistics: mean |M| over in-mask (nonzero) weights per
    /// layer, plus totals. Tracked for analysis; the per-neuron prune step
    /// does not consume them.
    pub fn refresh_stats(&mut self, model: &Model) {
        self.total_momentum = 0.0;
        self.total_non_zero = 0;
        for (l, params) in model.layers.iter().enumerate() {
            let (Some(m), LayerParams::SparseLinear { mask, .. }) = (&self.m[l], params) else {
                self.mean_momentum[l] = 0.0;
                self.non_zero[l] = 0;
                continue;
            };
            let mut sum = 0.0;
            let mut count = 0usize;
            for (n, row) in mask.rows.iter().enumerate() {
                for &j in row {
                    sum += m[n][j].abs();
                    count += 1;
                }
            }
            self.mean_momentum[l] = if count > 0 { sum / count as f64 } else { 0.0 };
            self.non_zero[l] = count;
            self.total_momentum += sum;
            self.total_non_zero += count;
        }
        if self.total_non_zero > 0 {
            self.total_momentum /= self.total_non_zero as f64;
        }
    }
}

/// One fan-in-preserving prune/regrow event. Per neuron: drop the
/// `prune_count` smallest-magnitude in-mask weights, then open the
/// `regrow_count` positions with the largest momentum magnitude among those
/// outside the pre-event mask (same-step pruned positions are not
/// candidates). Regrown weights start at exactly zero. Ties break to the
/// lowest input index.
pub fn momentum_prune_step(
    model: &mut Model,
    state: &mut MomentumState,
    schedule: &PruneSchedule,
) -> Result<()> {
    if schedule.strategy != SparsityStrategy::Momentum {
        return Err(Error::InvalidArg("schedule is not a momentum schedule".into()));
    }
    schedule.validate()?;
    let f = schedule.target_fan_in as usize;
    let (p1, r1) = (schedule.prune_count, schedule.regrow_count);
    state.refresh_stats(model);
    if p1 == 0 {
        return Ok(());
    }
    for (l, params) in model.layers.iter_mut().enumerate() {
        let LayerParams::SparseLinear { weights, mask, .. } = params else { continue };
        let m = state.m[l].as_ref().expect("momentum tracks sparse layers");
        let width = weights.first().map_or(0, Vec::len);
        for (n, row) in mask.rows.iter_mut().enumerate() {
            if row.len() != f {
                return Err(Error::Training(format!(
                    "layer {l} neuron {n} has fan-in {}, expected {f}",
                    row.len()
                )));
            }
            let mut by_magnitude = row.clone();
            by_magnitude.sort_by(|&a, &b| {
                weights[n][a].abs().partial_cmp(&weights[n][b].abs()).unwrap().then(a.cmp(&b))
            });
            let pruned: Vec<usize> = by_magnitude[..p1].to_vec();
            let mut candidates: Vec<usize> =
                (0..width).filter(|j| !row.contains(j)).collect();
            if candidates.len() < r1 {
                return Err(Error::Training(format!(
                    "layer {l} neuron {n}: {} zero positions cannot regrow {r1}",
                    candidates.len()
                )));
            }
            candidates.sort_by(|&a, &b| {
                m[n][b].abs().partial_cmp(&m[n][a].abs()).unwrap().then(a.cmp(&b))
            });
            let regrown = &candidates[..r1];
            for &j in &pruned {
                weights[n][j] = 0.0;
            }
            let mut next: Vec<usize> =
                row.iter().copied().filter(|j| !pruned.contains(j)).collect();
            for &j in regrown {
                weights[n][j] = 0.0;
                next.push(j);
            }
            next.sort_unstable();
            *row = next;
        }
    }
    // Event complete: momentum lives only on the new masks.
    for (l, params) in model.layers.iter().enumerate() {
        let (Some(m), LayerParams::SparseLinear { mask, .. }) = (&mut state.m[l], params) else {
            continue;
        };
        for (n, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if !mask.rows[n].contains(&j) {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(())
}

/// Total positions kept at sparsity `r`: `⌊total·(1−r)⌋`, with the product
/// nudged above float round-off so exact fractions (e.g. 10% of 100) do not
/// floor one short.
pub fn regrowth_budget(total_params: usize, sparsity: f64) -> usize {
    let x = total_params as f64 * (1.0 - sparsity);
    (x + x.abs() * 1e-12 + 1e-12).floor() as usize
}

/// Per-layer regrowth budget: `⌊total·(1−r)⌋` positions split by normalized
/// mean momentum, floor-rounded, remainder to the largest-momentum layer
/// (ties to the lowest index). All-zero momenta split evenly. Exposed for
/// analysis; the per-neuron prune step does not consume it.
pub fn regrowth_allocation(
    total_params: usize,
    sparsity: f64,
    mean_momenta: &[f64],
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::InvalidArg(format!("sparsity must be in [0, 1], got {sparsity}")));
    }
    if mean_momenta.is_empty() {
        return Ok(vec![]);
    }
    if mean_momenta.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::InvalidArg("mean momenta must be finite and non-negative".into()));
    }
    let budget = regrowth_budget(total_params, sparsity);
    let sum: f64 = mean_momenta.iter().sum();
    let shares: Vec<f64> = if sum == 0.0 {
        vec![1.0 / mean_momenta.len() as f64; mean_momenta.len()]
    } else {
        mean_momenta.iter().map(|&m| m / sum).collect()
    };
    let mut alloc: Vec<usize> =
        shares.iter().map(|&s| (budget as f64 * s).floor() as usize).collect();
    let used: usize = alloc.iter().sum();
    let largest = (0..shares.len())
        .max_by(|&a, &b| shares[a].partial_cmp(&shares[b]).unwrap().then(b.cmp(&a)))
        .expect("nonempty");
    alloc[largest] += budget - used;
    Ok(alloc)
}

// ---------------------------------------------------------------------------
// Iterative pruning

/// Per-event support targets walking linearly from `initial` down to
/// `target` over `events` prune events.
pub fn iterative_support_schedule(
    initial: usize,
    target: usize,
    events: usize,
) -> Result<Vec<usize>> {
    if target == 0 {
        return Err(Error::InvalidArg("target fan-in must be positive".into()));
    }
    if target > initial {
        return Err(Error::InvalidArg(format!(
            "target fan-in {target} exceeds the starting support {initial}"
        )));
    }
    if events == 0 {
        if target == initial {
            return Ok(vec![]);
        }
        return Err(Error::Training(format!(
            "no prune events scheduled, but support must shrink from {initial} to {target}"
        )));
    }
    Ok((1..=events)
        .map(|e| initial - ((e as f64 / events as f64) * (initial - target) as f64).round() as usize)
        .collect())
}

/// One magnitude-pruning event: every sparse neuron drops its
/// smallest-magnitude weights (ties to the lowest input index) until its
/// support reaches the linear schedule point `decay` of the way from fully
/// connected down to `target_fan_in`. Pruned positions never regrow.
pub fn iterative_prune_step(model: &mut Model, decay: f64, target_fan_in: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArg(format!("decay must be in [0, 1], got {decay}")));
    }
    for (l, params) in model.layers.iter_mut().enumerate() {
        let LayerParams::SparseLinear { weights, mask, .. } = params else { continue };
        let width = weights.first().map_or(0, Vec::len);
        if target_fan_in > width {
            return Err(Error::Training(format!(
                "layer {l}: target fan-in {target_fan_in} exceeds input width {width}"
            )));
        }
        let target = width - (decay * (width - target_fan_in) as f64).round() as usize;
        if target < target_fan_in {
            return Err(Error::Training(format!(
                "layer {l}: schedule would undershoot the target fan-in ({target} < {target_fan_in})"
            )));
        }
        for (n, row) in mask.rows.iter_mut().enumerate() {
            if row.len() < target {
                return Err(Error::Training(format!(
                    "layer {l} neuron {n}: support {} already below the scheduled {target}",
                    row.len()
                )));
            }
            let excess = row.len() - target;
            if excess == 0 {
                continue;
            }
            let mut by_magnitude = row.clone();
            by_magnitude.sort_by(|&a, &b| {
                weights[n][a].abs().partial_cmp(&weights[n][b].abs()).unwrap().then(a.cmp(&b))
            });
            for &j in &by_magnitude[..excess] {
                weights[n][j] = 0.0;
            }
            let drop: Vec<usize> = by_magnitude[..excess].to_vec();
            row.retain(|j| !drop.contains(j));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training driver

#[derive(Debug, Clone, PartialEq)]
pub struct FanInSummary {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training-batch loss across the epoch.
    pub loss: f64,
    /// Quantized-argmax training accuracy (class targets only).
    pub accuracy: Option<f64>,
    /// Per-layer fan-in distribution summary.
    pub fan_in: Vec<FanInSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
    pub prune_events: usize,
}

fn fan_in_summaries(model: &Model) -> Vec<FanInSummary> {
    model
        .layers
        .iter()
        .map(|params| {
            let supports: Vec<usize> = match params {
                LayerParams::SparseLinear { mask, .. } => {
                    mask.rows.iter().map(Vec::len).collect()
                }
                LayerParams::DenseQuantLinear { weights, .. } => {
                    weights.iter().map(Vec::len).collect()
                }
                LayerParams::SparseConv(_) => unreachable!("rejected before training"),
            };
            let min = supports.iter().copied().min().unwrap_or(0);
            let max = supports.iter().copied().max().unwrap_or(0);
            let mean = if supports.is_empty() {
                0.0
            } else {
                supports.iter().sum::<usize>() as f64 / supports.len() as f64
            };
            FanInSummary { min, mean, max }
        })
        .collect()
}

/// Metrics log as CSV: epoch, loss, accuracy, then min/mean/max fan-in per
/// layer.
pub fn metrics_to_csv(metrics: &[EpochMetrics]) -> String {
    let layers = metrics.first().map_or(0, |m| m.fan_in.len());
    let mut s = String::from("epoch,loss,accuracy");
    for l in 0..layers {
        s.push_str(&format!(",fanin{l}_min,fanin{l}_mean,fanin{l}_max"));
    }
    s.push('\n');
    for m in metrics {
        s.push_str(&format!("{},{}", m.epoch, m.loss));
        match m.accuracy {
            Some(a) => s.push_str(&format!(",{a}")),
            None => s.push(','),
        }
        for f in &m.fan_in {
            s.push_str(&format!(",{},{},{}", f.min, f.mean, f.max));
        }
        s.push('\n');
    }
    s
}

fn validate_training_inputs(
    model: &Model,
    features: &[Vec<f64>],
    targets: &Targets<'_>,
    cfg: &TrainConfig,
) -> Result<()> {
    model.validate()?;
    cfg.schedule.validate()?;
    if let Some((i, l)) =
        model.spec.layers.iter().enumerate().find(|(_, l)| l.kind == LayerKind::SparseConv)
    {
        return Err(Error::Unsupported(format!(
            "training covers linear layers only; layer {i} is {}",
            l.kind
        )));
    }
    if features.is_empty() {
        return Err(Error::InvalidArg("training set is empty".into()));
    }
    if targets.len() != features.len() {
        return Err(Error::InvalidArg(format!(
            "{} feature rows but {} targets",
            features.len(),
            targets.len()
        )));
    }
    if let Some(row) = features.iter().find(|r| r.len() != model.spec.input_features) {
        return Err(Error::InvalidArg(format!(
            "feature rows have {} entries, model expects {}",
            row.len(),
            model.spec.input_features
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArg("batch size must be positive".into()));
    }
    if !(cfg.optimizer.learning_rate > 0.0 && cfg.optimizer.learning_rate.is_finite()) {
        return Err(Error::InvalidArg("learning rate must be positive and finite".into()));
    }
    if !(0.0..1.0).contains(&cfg.momentum_alpha) {
        return Err(Error::InvalidArg(format!(
            "momentum smoothing must be in [0, 1), got {}",
            cfg.momentum_alpha
        )));
    }
    if let Targets::Classes(labels) = targets {
        let out = model.spec.layers.last().unwrap().neurons;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= out) {
            return Err(Error::InvalidArg(format!(
                "label {bad} out of range for {out} outputs"
            )));
        }
    }
    // Strategy-specific mask preconditions.
    match cfg.schedule.strategy {
        SparsityStrategy::Apriori => {}
        SparsityStrategy::Momentum => {
            let f = cfg.schedule.target_fan_in as usize;
            for (i, params) in model.layers.iter().enumerate() {
                if let LayerParams::SparseLinear { mask, .. } = params {
                    if mask.rows.iter().any(|r| r.len() != f) {
                        return Err(Error::InvalidArg(format!(
                            "momentum pruning holds fan-in at {f}, but layer {i} differs"
                        )));
                    }
                }
            }
        }
        SparsityStrategy::Iterative => {
            for (i, params) in model.layers.iter().enumerate() {
                if let LayerParams::SparseLinear { weights, mask, .. } = params {
                    let width = weights.first().map_or(0, Vec::len);
                    if mask.rows.iter().any(|r| r.len() != width) {
                        return Err(Error::InvalidArg(format!(
                            "iterative pruning starts fully connected, but layer {i} is already sparse"
                        )));
                    }
                    if (cfg.schedule.target_fan_in as usize) > width {
                        return Err(Error::Training(format!(
                            "layer {i}: target fan-in {} exceeds input width {width}",
                            cfg.schedule.target_fan_in
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Train in place. Masked weights stay exactly zero throughout; a NaN (or
/// otherwise non-finite) loss aborts with a diagnostic; a fixed seed makes
/// the metrics bitwise reproducible.
pub fn train(
    model: &mut Model,
    features: &[Vec<f64>],
    targets: &Targets<'_>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_observed(model, features, targets, cfg, |_| {})
}

pub(crate) fn train_observed(
    model: &mut Model,
    features: &[Vec<f64>],
    targets: &Targets<'_>,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&Model),
) -> Result<TrainReport> {
    validate_training_inputs(model, features, targets, cfg)?;
    let n = features.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let momentum_active = cfg.schedule.strategy == SparsityStrategy::Momentum;
    let total_events = if cfg.schedule.steps_between > 0 {
        total_steps / cfg.schedule.steps_between
    } else {
        0
    };
    if cfg.schedule.strategy == SparsityStrategy::Iterative && total_events == 0 {
        let needs_shrink = model.layers.iter().any(|p| match p {
            LayerParams::SparseLinear { weights, .. } => {
                weights.first().map_or(0, Vec::len) > cfg.schedule.target_fan_in as usize
            }
            _ => false,
        });
        if needs_shrink {
            return Err(Error::Training(
                "iterative schedule never fires: no prune events fit the run".into(),
            ));
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptState::new(model);
    let mut momentum =
        momentum_active.then(|| MomentumState::new(model, cfg.momentum_alpha));
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut events_fired = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let pass =
                loss_and_grads(model, chunk, features, targets, cfg, QuantMode::Exact, momentum_active)?;
            if !pass.loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {} at epoch {epoch}, step {step}",
                    pass.loss
                )));
            }
            if !cfg.freeze_batchnorm {
                update_running_stats(model, &pass.batch_stats, chunk.len());
            }
            if let Some(state) = momentum.as_mut() {
                state.update(&pass.grads);
            }
            optimizer_step(model, &pass.grads, &mut opt, &cfg.optimizer, cfg.freeze_batchnorm);
            loss_sum += pass.loss;
            batches += 1;
            correct += pass.correct;
            step += 1;

            let fire = cfg.schedule.steps_between > 0
                && step % cfg.schedule.steps_between == 0
                && events_fired < total_events;
            if fire {
                match cfg.schedule.strategy {
                    SparsityStrategy::Apriori => {}
                    SparsityStrategy::Momentum => {
                        let before = mask_snapshot(model);
                        momentum_prune_step(
                            model,
                            momentum.as_mut().expect("state exists"),
                            &cfg.schedule,
                        )?;
                        reset_changed_positions(model, &before, &mut opt);
                        events_fired += 1;
                    }
                    SparsityStrategy::Iterative => {
                        events_fired += 1;
                        let decay = events_fired as f64 / total_events as f64;
                        let before = mask_snapshot(model);
                        iterative_prune_step(
                            model,
                            decay,
                            cfg.schedule.target_fan_in as usize,
                        )?;
                        reset_changed_positions(model, &before, &mut opt);
                    }
                }
            }
            observe(model);
        }
        let accuracy = match targets {
            Targets::Classes(_) => Some(correct as f64 / n as f64),
            Targets::Values(_) => None,
        };
        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / batches as f64,
            accuracy,
            fan_in: fan_in_summaries(model),
        });
    }
    model.validate()?;
    Ok(TrainReport { metrics, steps: step, prune_events: events_fired })
}

fn mask_snapshot(model: &Model) -> Vec<Option<Vec<Vec<usize>>>> {
    model
        .layers
        .iter()
        .map(|p| match p {
            LayerParams::SparseLinear { mask, .. } => Some(mask.rows.clone()),
            _ => None,
        })
        .collect()
}

/// One parameter's analytic gradient next to a central finite difference,
/// from [`gradient_check`].
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub layer: usize,
    /// Parameter name within the layer, e.g. `"weight[2][5]"` or `"gamma[0]"`.
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientCheck {
    /// Disagreement relative to the larger magnitude, guarded near zero.
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
            / self.analytic.abs().max(self.numeric.abs()).max(1e-10)
    }
}

/// Compare the training backward against central finite differences for every
/// trainable parameter (on-mask weights, batch-norm scale and shift), treating
/// all of `features` as a single batch.
///
/// The numeric side differentiates the smooth surrogate the straight-through
/// estimator stands in for: each quantizer keeps its clamp but drops its
/// rounding. That is the function the analytic backward differentiates;
/// differencing the raw staircase forward would read zero almost everywhere.
pub fn gradient_check(
    model: &Model,
    features: &[Vec<f64>],
    targets: &Targets<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<GradientCheck>> {
    validate_training_inputs(model, features, targets, cfg)?;
    let batch: Vec<usize> = (0..features.len()).collect();
    let pass = loss_and_grads(model, &batch, features, targets, cfg, QuantMode::Surrogate, false)?;
    let mut work = model.clone();
    let mut out = Vec::new();
    let mut push = |work: &mut Model,
                    at: &mut dyn for<'m> FnMut(&'m mut Model) -> &'m mut f64,
                    layer: usize,
                    parameter: String,
                    analytic: f64|
     -> Result<()> {
        let theta = *at(work);
        let h = 1e-5 * theta.abs().max(1.0);
        *at(work) = theta + h;
        let up =
            loss_and_grads(work, &batch, features, targets, cfg, QuantMode::Surrogate, false)?
                .loss;
        *at(work) = theta - h;
        let down =
            loss_and_grads(work, &batch, features, targets, cfg, QuantMode::Surrogate, false)?
                .loss;
        *at(work) = theta;
        let numeric = (up - down) / (2.0 * h);
        out.push(GradientCheck { layer, parameter, analytic, numeric });
        Ok(())
    };
    for (li, params) in model.layers.iter().enumerate() {
        let bn = match params {
            LayerParams::SparseLinear { mask, bn, .. } => {
                for (n, row) in mask.rows.iter().enumerate() {
                    for &j in row {
                        push(
                            &mut work,
                            &mut |m| match &mut m.layers[li] {
                                LayerParams::SparseLinear { weights, .. } => &mut weights[n][j],
                                _ => unreachable!("layer kind is fixed"),
                            },
                            li,
                            format!("weight[{n}][{j}]"),
                            pass.grads.weights[li][n][j],
                        )?;
                    }
                }
                bn
            }
            LayerParams::DenseQuantLinear { weights, bn } => {
                for n in 0..weights.len() {
                    for j in 0..weights[n].len() {
                        push(
                            &mut work,
                            &mut |m| match &mut m.layers[li] {
                                LayerParams::DenseQuantLinear { weights, .. } => {
                                    &mut weights[n][j]
                                }
                                _ => unreachable!("layer kind is fixed"),
                            },
                            li,
                            format!("weight[{n}][{j}]"),
                            pass.grads.weights[li][n][j],
                        )?;
                    }
                }
                bn
            }
            LayerParams::SparseConv(_) => unreachable!("rejected by input validation"),
        };
        for n in 0..bn.gamma.len() {
            push(
                &mut work,
                &mut |m| &mut bn_mut(&mut m.layers[li]).gamma[n],
                li,
                format!("gamma[{n}]"),
                pass.grads.gamma[li][n],
            )?;
            push(
                &mut work,
                &mut |m| &mut bn_mut(&mut m.layers[li]).beta[n],
                li,
                format!("beta[{n}]"),
                pass.grads.beta[li][n],
            )?;
        }
    }
    Ok(out)
}

fn bn_mut(params: &mut LayerParams) -> &mut BatchNorm {
    match params {
        LayerParams::SparseLinear { bn, .. } | LayerParams::DenseQuantLinear { bn, .. } => bn,
        LayerParams::SparseConv(_) => unreachable!("rejected by input validation"),
    }
}

/// Positions entering or leaving a mask start optimization from scratch.
fn reset_changed_positions(
    model: &Model,
    before: &[Option<Vec<Vec<usize>>>],
    opt: &mut OptState,
) {
    for (l, params) in model.layers.iter().enumerate() {
        let (LayerParams::SparseLinear { mask, .. }, Some(prev)) = (params, &before[l]) else {
            continue;
        };
        for (n, row) in mask.rows.iter().enumerate() {
            for j in prev[n].iter().filter(|j| !row.contains(j)) {
                opt.reset_weight(l, n, *j);
            }
            for j in row.iter().filter(|j| !prev[n].contains(j)) {
                opt.reset_weight(l, n, *j);
            }
        }
    }
}
