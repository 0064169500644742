//! Runtime model parameters and exact inference semantics.
//!
//! A [`Model`] pairs a validated [`TopologySpec`] with trained parameters
//! and defines the float forward pass that the truth tables and the netlist
//! must reproduce bit-exactly. Inference always uses batch-norm *running*
//! statistics; batch statistics exist only inside the trainer.

use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{
    quantize, quantize_tensor, QuantTensor, QuantizerParams, GRID_TOLERANCE,
};
use crate::topology::{
    init_random_masks, neuron_rng, ConnectivityMask, LayerKind, LayerMasks, LayerSpec,
    TopologySpec,
};

pub const MODEL_FILE_VERSION: u32 = 1;

/// Per-neuron batch normalization in inference form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Stabilizer inside the square root, kept per neuron.
    pub epsilon: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(n: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            running_mean: vec![0.0; n],
            running_var: vec![1.0; n],
            epsilon: vec![0.0; n],
        }
    }

    /// Standard trainable initialization: identity transform with a small
    /// stabilizer.
    pub fn fresh(n: usize) -> Self {
        BatchNorm { epsilon: vec![1e-5; n], ..BatchNorm::identity(n) }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
            ("epsilon", &self.epsilon),
        ] {
            if v.len() != n {
                return Err(Error::InvalidModel(format!(
                    "batchnorm {name} has {} entries, expected {n}",
                    v.len()
                )));
            }
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::InvalidModel(format!("batchnorm {name} contains {bad}")));
            }
        }
        for i in 0..n {
            if self.running_var[i] < 0.0 || self.epsilon[i] < 0.0 {
                return Err(Error::InvalidModel(format!(
                    "batchnorm neuron {i} has negative variance or epsilon"
                )));
            }
            if self.running_var[i] + self.epsilon[i] <= 0.0 {
                return Err(Error::InvalidModel(format!(
                    "batchnorm neuron {i} would divide by zero (var + eps = 0)"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, i: usize, x: f64) -> f64 {
        self.gamma[i] * (x - self.running_mean[i])
            / (self.running_var[i] + self.epsilon[i]).sqrt()
            + self.beta[i]
    }
}

/// Both sparse stages of a depthwise-separable conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// Row `u`: kernel of depthwise unit `u`, length `k²`, zeros off-mask.
    pub depthwise_weights: Vec<Vec<f64>>,
    /// Row `u`: live positions within the `k×k` window, row-major.
    pub depthwise_mask: ConnectivityMask,
    pub depthwise_bn: BatchNorm,
    /// Row `n`: channel taps of pointwise neuron `n`, length = unit count.
    pub pointwise_weights: Vec<Vec<f64>>,
    pub pointwise_mask: ConnectivityMask,
    pub pointwise_bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    SparseLinear {
        /// `neurons × input_features`, exact zeros off-mask.
        weights: Vec<Vec<f64>>,
        mask: ConnectivityMask,
        bn: BatchNorm,
    },
    DenseQuantLinear {
        /// Master weights; quantized onto the weight grid at every use.
        weights: Vec<Vec<f64>>,
        bn: BatchNorm,
    },
    SparseConv(ConvParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: TopologySpec,
    pub layers: Vec<LayerParams>,
}

/// Quantize one weight onto the symmetric signed grid
/// `{−(2^(b−1)−1), …, 0, …, +(2^(b−1)−1)} · step` with
/// `step = max_val/(2^(b−1)−1)`.
pub fn quantize_weight(w: f64, bit_width: u32, max_val: f64) -> f64 {
    let top = ((1u32 << (bit_width - 1)) - 1) as f64;
    let step = max_val / top;
    (w / step).round().clamp(-top, top) * step
}

/// Straight-through gate for the weight quantizer: gradient passes while the
/// master weight is inside the representable range (inclusive).
pub fn weight_ste_gate(w: f64, max_val: f64) -> bool {
    w.abs() <= max_val
}

/// Masked dot product: `Σ_{j ∈ mask row} weights[j]·x[j]`.
#[inline]
pub fn sparse_dot(weights: &[f64], mask_row: &[usize], x: &[f64]) -> f64 {
    mask_row.iter().map(|&j| weights[j] * x[j]).sum()
}

/// Sparse linear layer: masked matmul then batch norm. Returns the post-BN
/// pre-activation; the caller applies the output quantizer.
pub fn forward_sparse_linear(
    weights: &[Vec<f64>],
    mask: &ConnectivityMask,
    bn: &BatchNorm,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_width("sparse_linear", weights.first().map_or(0, Vec::len), x.len())?;
    Ok(weights
        .iter()
        .zip(&mask.rows)
        .enumerate()
        .map(|(n, (w, row))| bn.apply(n, sparse_dot(w, row, x)))
        .collect())
}

/// Dense layer with weights quantized on the fly, then batch norm.
pub fn forward_dense_quant_linear(
    weights: &[Vec<f64>],
    weight_params: &QuantizerParams,
    bn: &BatchNorm,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_width("dense_quant_linear", weights.first().map_or(0, Vec::len), x.len())?;
    Ok(weights
        .iter()
        .enumerate()
        .map(|(n, w)| {
            let dot = w
                .iter()
                .zip(x)
                .map(|(&wj, &xj)| {
                    quantize_weight(wj, weight_params.bit_width, weight_params.max_val) * xj
                })
                .sum();
            bn.apply(n, dot)
        })
        .collect())
}

fn check_width(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidArg(format!(
            "{what} expects {expected} inputs, got {got}"
        )));
    }
    Ok(())
}

/// Output of a conv layer: the post-BN pointwise pre-activations and the
/// quantized activation, both flattened channel-major (c·H·W + h·W + w).
pub struct ConvOutput {
    pub raw: Vec<f64>,
    pub quantized: QuantTensor,
    pub out_h: usize,
    pub out_w: usize,
}

/// Depthwise k×k sparse conv → BN → intermediate quantizer → pointwise 1×1
/// sparse conv → BN → output quantizer. Valid-only windows (no padding).
pub fn forward_sparse_conv(
    layer: &LayerSpec,
    p: &ConvParams,
    shape: (usize, usize, usize),
    x: &[f64],
) -> Result<ConvOutput> {
    let (h, w, c) = shape;
    check_width("sparse_conv", h * w * c, x.len())?;
    let k = layer.kernel_size.ok_or_else(|| missing("kernel_size"))? as usize;
    let stride = layer.stride.ok_or_else(|| missing("stride"))? as usize;
    let out_h = LayerSpec::conv_out_dim(h, k as u32, stride as u32)?;
    let out_w = LayerSpec::conv_out_dim(w, k as u32, stride as u32)?;
    let units = layer.depthwise_units(c);
    let inter = layer.intermediate_params()?;

    // Depthwise: unit u convolves one input channel (channel u, or channel 0
    // when the layer fans a single-channel input out to many units).
    let pix = out_h * out_w;
    let mut mid = vec![0.0f64; units * pix];
    for u in 0..units {
        let ch = if layer.first_layer { 0 } else { u };
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let kernel = &p.depthwise_weights[u];
        let taps = &p.depthwise_mask.rows[u];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut acc = 0.0;
                for &m in taps {
                    let (kh, kw) = (m / k, m % k);
                    acc += kernel[m] * plane[(oh * stride + kh) * w + (ow * stride + kw)];
                }
                mid[u * pix + oh * out_w + ow] = quantize(p.depthwise_bn.apply(u, acc), &inter);
            }
        }
    }

    // Pointwise: neuron n mixes the selected intermediate channels per pixel.
    let mut raw = vec![0.0f64; layer.neurons * pix];
    for n in 0..layer.neurons {
        let taps = &p.pointwise_mask.rows[n];
        let wrow = &p.pointwise_weights[n];
        for px in 0..pix {
            let acc: f64 = taps.iter().map(|&u| wrow[u] * mid[u * pix + px]).sum();
            raw[n * pix + px] = p.pointwise_bn.apply(n, acc);
        }
    }
    let quantized = quantize_tensor(&raw, &layer.out_params())?;
    Ok(ConvOutput { raw, quantized, out_h, out_w })
}

fn missing(field: &str) -> Error {
    Error::InvalidTopology(format!("conv layer is missing {field}"))
}

/// Everything one forward pass produces, layer by layer.
pub struct Activations {
    /// The quantized model input.
    pub input: QuantTensor,
    /// Post-BN pre-quantizer outputs per layer (flattened for conv).
    pub raw: Vec<Vec<f64>>,
    /// Output-quantized activations per layer (flattened for conv).
    pub quantized: Vec<QuantTensor>,
}

impl Activations {
    /// Raw output of the final layer — the classification logits.
    pub fn logits(&self) -> &[f64] {
        self.raw.last().expect("models have at least one layer")
    }
}

/// Index of the largest value, first occurrence winning ties. This is the
/// argmax the netlist consumer applies to the quantized output bundle, so
/// software accuracy numbers match hardware exactly.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Fresh model: deterministic random masks and weights, identity-with-
    /// stabilizer batch norm. `seed` overrides the spec's stored seed.
    pub fn new_random(spec: &TopologySpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let masks = init_random_masks(spec, seed)?;
        let shapes = spec.spatial_shapes()?;
        let layers = spec
            .layers
            .iter()
            .zip(masks)
            .enumerate()
            .map(|(i, (layer, mask))| {
                Ok(match (layer.kind, mask) {
                    (LayerKind::SparseLinear, LayerMasks::Linear(mask)) => {
                        let width = spec.feature_count_in(i)?;
                        let weights = masked_random_rows(&mask, width, seed, i, 2);
                        LayerParams::SparseLinear { weights, mask, bn: BatchNorm::fresh(layer.neurons) }
                    }
                    (LayerKind::DenseQuantLinear, LayerMasks::Dense) => {
                        let width = spec.feature_count_in(i)?;
                        let full = ConnectivityMask {
                            rows: vec![(0..width).collect(); layer.neurons],
                        };
                        let weights = masked_random_rows(&full, width, seed, i, 2);
                        LayerParams::DenseQuantLinear { weights, bn: BatchNorm::fresh(layer.neurons) }
                    }
                    (LayerKind::SparseConv, LayerMasks::Conv { depthwise, pointwise }) => {
                        let (_, _, c) = shapes[i];
                        let k2 = (layer.kernel_size.expect("validated") as usize).pow(2);
                        let units = layer.depthwise_units(c);
                        LayerParams::SparseConv(ConvParams {
                            depthwise_weights: masked_random_rows(&depthwise, k2, seed, i, 2),
                            depthwise_mask: depthwise,
                            depthwise_bn: BatchNorm::fresh(units),
                            pointwise_weights: masked_random_rows(&pointwise, units, seed, i, 3),
                            pointwise_mask: pointwise,
                            pointwise_bn: BatchNorm::fresh(layer.neurons),
                        })
                    }
                    _ => unreachable!("mask variant follows layer kind"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model { spec: spec.clone(), layers })
    }

    /// Like [`Model::new_random`], but sparse linear layers start fully
    /// connected — the launch point for iterative magnitude pruning, which
    /// only ever removes connections.
    pub fn new_random_dense(spec: &TopologySpec, seed: u64) -> Result<Model> {
        let mut model = Model::new_random(spec, seed)?;
        for (i, params) in model.layers.iter_mut().enumerate() {
            if let LayerParams::SparseLinear { weights, mask, .. } = params {
                let width = spec.feature_count_in(i)?;
                *mask = ConnectivityMask { rows: vec![(0..width).collect(); weights.len()] };
                *weights = masked_random_rows(mask, width, seed, i, 2);
            }
        }
        Ok(model)
    }

    /// Exact float forward pass on one example's raw features.
    pub fn forward(&self, features: &[f64]) -> Result<Activations> {
        check_width("model input", self.spec.input_features, features.len())?;
        let input = quantize_tensor(features, &self.spec.layers[0].in_params())?;
        let shapes = self.spec.spatial_shapes()?;
        let mut raw = Vec::with_capacity(self.layers.len());
        let mut quantized: Vec<QuantTensor> = Vec::with_capacity(self.layers.len());
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            let x = self.layer_input(i, &input, &quantized);
            match params {
                LayerParams::SparseLinear { weights, mask, bn } => {
                    let y = forward_sparse_linear(weights, mask, bn, &x)?;
                    quantized.push(quantize_tensor(&y, &layer.out_params())?);
                    raw.push(y);
                }
                LayerParams::DenseQuantLinear { weights, bn } => {
                    let y = forward_dense_quant_linear(weights, &weight_params(layer)?, bn, &x)?;
                    quantized.push(quantize_tensor(&y, &layer.out_params())?);
                    raw.push(y);
                }
                LayerParams::SparseConv(p) => {
                    let out = forward_sparse_conv(layer, p, shapes[i], &x)?;
                    raw.push(out.raw);
                    quantized.push(out.quantized);
                }
            }
        }
        Ok(Activations { input, raw, quantized })
    }

    /// Input vector for layer `i`: previous quantized output (or the model
    /// input), with every skip source's quantized output appended in
    /// declaration order.
    pub fn layer_input(&self, i: usize, input: &QuantTensor, quantized: &[QuantTensor]) -> Vec<f64> {
        let main = if i == 0 { &input.values } else { &quantized[i - 1].values };
        let mut x = main.clone();
        for s in self.spec.skip_sources_into(i) {
            x.extend_from_slice(&quantized[s].values);
        }
        x
    }

    /// Class prediction with hardware semantics: argmax over the final
    /// layer's *quantized* outputs, ties to the lowest index.
    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        let acts = self.forward(features)?;
        Ok(argmax(&acts.quantized.last().expect("nonempty").values))
    }

    /// Structural soundness of the parameters against the spec. Run before
    /// save and after load.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.layers.len() != self.spec.layers.len() {
            return Err(Error::InvalidModel(format!(
                "{} parameter blocks for {} layers",
                self.layers.len(),
                self.spec.layers.len()
            )));
        }
        let shapes = self.spec.spatial_shapes()?;
        for (i, (layer, params)) in self.spec.layers.iter().zip(&self.layers).enumerate() {
            let ctx = |e: Error| match e {
                Error::InvalidModel(m) | Error::InvalidArg(m) => {
                    Error::InvalidModel(format!("layer {i}: {m}"))
                }
                other => other,
            };
            match (layer.kind, params) {
                (LayerKind::SparseLinear, LayerParams::SparseLinear { weights, mask, bn }) => {
                    let width = self.spec.feature_count_in(i)?;
                    let fan_in = layer.fan_in.expect("validated");
                    validate_sparse_stage(weights, mask, layer.neurons, width, fan_in)
                        .map_err(ctx)?;
                    bn.validate(layer.neurons).map_err(ctx)?;
                }
                (LayerKind::DenseQuantLinear, LayerParams::DenseQuantLinear { weights, bn }) => {
                    let width = self.spec.feature_count_in(i)?;
                    validate_matrix(weights, layer.neurons, width).map_err(ctx)?;
                    bn.validate(layer.neurons).map_err(ctx)?;
                }
                (LayerKind::SparseConv, LayerParams::SparseConv(p)) => {
                    let (_, _, c) = shapes[i];
                    let k2 = (layer.kernel_size.expect("validated") as usize).pow(2);
                    let units = layer.depthwise_units(c);
                    let x_k = layer.kernel_fan_in.expect("validated");
                    let x_s = layer.pointwise_fan_in.expect("validated");
                    validate_sparse_stage(&p.depthwise_weights, &p.depthwise_mask, units, k2, x_k)
                        .map_err(ctx)?;
                    p.depthwise_bn.validate(units).map_err(ctx)?;
                    validate_sparse_stage(
                        &p.pointwise_weights,
                        &p.pointwise_mask,
                        layer.neurons,
                        units,
                        x_s,
                    )
                    .map_err(ctx)?;
                    p.pointwise_bn.validate(layer.neurons).map_err(ctx)?;
                }
                (kind, _) => {
                    return Err(Error::InvalidModel(format!(
                        "layer {i} parameters do not match kind {kind}"
                    )))
                }
            }
        }
        Ok(())
    }
}

fn weight_params(layer: &LayerSpec) -> Result<QuantizerParams> {
    Ok(QuantizerParams {
        bit_width: layer
            .weight_bit_width
            .ok_or_else(|| Error::InvalidTopology("missing weight_bit_width".into()))?,
        max_val: layer
            .max_val_weight
            .ok_or_else(|| Error::InvalidTopology("missing max_val_weight".into()))?,
    })
}

/// Random weight rows with support limited to the mask: uniform on
/// `±sqrt(6/fan_in)`, drawn in ascending mask order from the per-neuron
/// stream, zeros elsewhere.
fn masked_random_rows(
    mask: &ConnectivityMask,
    width: usize,
    seed: u64,
    layer: usize,
    stage: u64,
) -> Vec<Vec<f64>> {
    mask.rows
        .iter()
        .enumerate()
        .map(|(n, row)| {
            let mut rng = neuron_rng(seed, layer, stage, n);
            let bound = (6.0 / row.len().max(1) as f64).sqrt();
            let mut weights = vec![0.0; width];
            for &j in row {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                weights[j] = bound * (2.0 * u - 1.0);
            }
            weights
        })
        .collect()
}

fn validate_matrix(weights: &[Vec<f64>], rows: usize, width: usize) -> Result<()> {
    if weights.len() != rows {
        return Err(Error::InvalidModel(format!(
            "{} weight rows, expected {rows}",
            weights.len()
        )));
    }
    for (n, row) in weights.iter().enumerate() {
        if row.len() != width {
            return Err(Error::InvalidModel(format!(
                "weight row {n} has {} entries, expected {width}",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|w| !w.is_finite()) {
            return Err(Error::InvalidModel(format!("weight row {n} contains {bad}")));
        }
    }
    Ok(())
}

/// One sparse stage: weight matrix plus mask, with support uniformity and
/// exact off-mask zeros. `fan_in` is the spec target; larger uniform support
/// is legal (a model saved mid-way through an iterative pruning schedule),
/// smaller never is.
fn validate_sparse_stage(
    weights: &[Vec<f64>],
    mask: &ConnectivityMask,
    rows: usize,
    width: usize,
    fan_in: usize,
) -> Result<()> {
    validate_matrix(weights, rows, width)?;
    if mask.rows.len() != rows {
        return Err(Error::InvalidModel(format!(
            "{} mask rows, expected {rows}",
            mask.rows.len()
        )));
    }
    let support = mask.rows.first().map_or(0, Vec::len);
    if support < fan_in {
        return Err(Error::InvalidModel(format!(
            "mask support {support} below the specified fan_in {fan_in}"
        )));
    }
    if mask.rows.iter().any(|r| r.len() != support) {
        return Err(Error::InvalidModel("mask rows must share one support size".into()));
    }
    mask.validate(support, width)?;
    for (n, (w, row)) in weights.iter().zip(&mask.rows).enumerate() {
        let mut on = vec![false; width];
        for &j in row {
            on[j] = true;
        }
        for (j, &wj) in w.iter().enumerate() {
            if !on[j] && wj != 0.0 {
                return Err(Error::InvalidModel(format!(
                    "neuron {n} weight {j} = {wj} lies outside its mask"
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Serialized form

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    topology: TopologySpec,
    layers: Vec<ModelFileLayer>,
}

#[derive(Serialize, Deserialize)]
struct ModelFileLayer {
    kind: LayerKind,
    weights: MatrixField,
    mask: Option<MaskField>,
    batchnorm: BnField,
    quantizer: QuantizerField,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixField {
    Single(Vec<Vec<f64>>),
    Stages { depthwise: Vec<Vec<f64>>, pointwise: Vec<Vec<f64>> },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MaskField {
    Single(ConnectivityMask),
    Stages { depthwise: ConnectivityMask, pointwise: ConnectivityMask },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BnField {
    Single(BatchNorm),
    Stages { depthwise: BatchNorm, pointwise: BatchNorm },
}

#[derive(Serialize, Deserialize)]
struct QuantizerField {
    input: QuantizerParams,
    output: QuantizerParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<QuantizerParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intermediate: Option<QuantizerParams>,
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let file = ModelFile {
            version: MODEL_FILE_VERSION,
            topology: self.spec.clone(),
            layers: self
                .spec
                .layers
                .iter()
                .zip(&self.layers)
                .map(|(layer, params)| {
                    let quantizer = QuantizerField {
                        input: layer.in_params(),
                        output: layer.out_params(),
                        weight: match layer.kind {
                            LayerKind::DenseQuantLinear => Some(weight_params(layer)?),
                            _ => None,
                        },
                        intermediate: match layer.kind {
                            LayerKind::SparseConv => Some(layer.intermediate_params()?),
                            _ => None,
                        },
                    };
                    Ok(match params {
                        LayerParams::SparseLinear { weights, mask, bn } => ModelFileLayer {
                            kind: layer.kind,
                            weights: MatrixField::Single(weights.clone()),
                            mask: Some(MaskField::Single(mask.clone())),
                            batchnorm: BnField::Single(bn.clone()),
                            quantizer,
                        },
                        LayerParams::DenseQuantLinear { weights, bn } => {
                            // Persist weights on their grid: the file is the
                            // hardware-facing artifact, not the training state.
                            let wq = weight_params(layer)?;
                            let weights = weights
                                .iter()
                                .map(|row| {
                                    row.iter()
                                        .map(|&w| quantize_weight(w, wq.bit_width, wq.max_val))
                                        .collect()
                                })
                                .collect();
                            ModelFileLayer {
                                kind: layer.kind,
                                weights: MatrixField::Single(weights),
                                mask: None,
                                batchnorm: BnField::Single(bn.clone()),
                                quantizer,
                            }
                        }
                        LayerParams::SparseConv(p) => ModelFileLayer {
                            kind: layer.kind,
                            weights: MatrixField::Stages {
                                depthwise: p.depthwise_weights.clone(),
                                pointwise: p.pointwise_weights.clone(),
                            },
                            mask: Some(MaskField::Stages {
                                depthwise: p.depthwise_mask.clone(),
                                pointwise: p.pointwise_mask.clone(),
                            }),
                            batchnorm: BnField::Stages {
                                depthwise: p.depthwise_bn.clone(),
                                pointwise: p.pointwise_bn.clone(),
                            },
                            quantizer,
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Model> {
        let file: ModelFile = serde_json::from_str(json)?;
        if file.version != MODEL_FILE_VERSION {
            return Err(Error::InvalidModel(format!(
                "file version {} (this build reads version {MODEL_FILE_VERSION})",
                file.version
            )));
        }
        file.topology.validate()?;
        if file.layers.len() != file.topology.layers.len() {
            return Err(Error::InvalidModel(format!(
                "{} layer payloads for {} topology layers",
                file.layers.len(),
                file.topology.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, (spec_layer, payload)) in
            file.topology.layers.iter().zip(file.layers).enumerate()
        {
            let err = |msg: String| Error::InvalidModel(format!("layer {i}: {msg}"));
            if payload.kind != spec_layer.kind {
                return Err(err(format!(
                    "payload kind {} does not match topology kind {}",
                    payload.kind, spec_layer.kind
                )));
            }
            check_quantizers(spec_layer, &payload.quantizer).map_err(|e| err(e.to_string()))?;
            layers.push(match (payload.weights, payload.mask, payload.batchnorm) {
                (MatrixField::Single(weights), Some(MaskField::Single(mask)), BnField::Single(bn))
                    if spec_layer.kind == LayerKind::SparseLinear =>
                {
                    LayerParams::SparseLinear { weights, mask, bn }
                }
                (MatrixField::Single(weights), None, BnField::Single(bn))
                    if spec_layer.kind == LayerKind::DenseQuantLinear =>
                {
                    let wq = weight_params(spec_layer)?;
                    check_weights_on_grid(&weights, &wq).map_err(|e| err(e.to_string()))?;
                    LayerParams::DenseQuantLinear { weights, bn }
                }
                (
                    MatrixField::Stages { depthwise: dw, pointwise: pw },
                    Some(MaskField::Stages { depthwise: dwm, pointwise: pwm }),
                    BnField::Stages { depthwise: dwb, pointwise: pwb },
                ) if spec_layer.kind == LayerKind::SparseConv => {
                    LayerParams::SparseConv(ConvParams {
                        depthwise_weights: dw,
                        depthwise_mask: dwm,
                        depthwise_bn: dwb,
                        pointwise_weights: pw,
                        pointwise_mask: pwm,
                        pointwise_bn: pwb,
                    })
                }
                _ => return Err(err("payload fields do not match the layer kind".into())),
            });
        }
        let model = Model { spec: file.topology, layers };
        model.validate()?;
        Ok(model)
    }
}

fn check_quantizers(layer: &LayerSpec, q: &QuantizerField) -> Result<()> {
    if q.input != layer.in_params() || q.output != layer.out_params() {
        return Err(Error::InvalidModel(
            "stored quantizer parameters disagree with the topology".into(),
        ));
    }
    match layer.kind {
        LayerKind::DenseQuantLinear => {
            if q.weight != Some(weight_params(layer)?) {
                return Err(Error::InvalidModel(
                    "stored weight quantizer disagrees with the topology".into(),
                ));
            }
        }
        LayerKind::SparseConv => {
            if q.intermediate != Some(layer.intermediate_params()?) {
                return Err(Error::InvalidModel(
                    "stored intermediate quantizer disagrees with the topology".into(),
                ));
            }
        }
        LayerKind::SparseLinear => {
            if q.weight.is_some() || q.intermediate.is_some() {
                return Err(Error::InvalidModel(
                    "sparse_linear layers carry no weight/intermediate quantizer".into(),
                ));
            }
        }
    }
    Ok(())
}

fn check_weights_on_grid(weights: &[Vec<f64>], wq: &QuantizerParams) -> Result<()> {
    let tol = GRID_TOLERANCE * wq.max_val.max(1.0);
    for (n, row) in weights.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let snapped = quantize_weight(w, wq.bit_width, wq.max_val);
            if (w - snapped).abs() > tol {
                return Err(Error::InvalidModel(format!(
                    "weight [{n}][{j}] = {w} is off the {}-bit weight grid",
                    wq.bit_width
                )));
            }
        }
    }
    Ok(())
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let json = model.to_json()?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let json = std::fs::read_to_string(path)?;
    Model::from_json(&json)
}
