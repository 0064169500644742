//! Declarative network descriptions and connectivity masks.
//!
//! A [`TopologySpec`] is the single source of truth for a model's shape:
//! layer kinds, widths, fan-ins, bit widths, quantizer ranges, skip links.
//! Everything downstream — training, cost prediction, tabulation, netlist
//! emission — derives its structure from here, so validation is strict and
//! front-loaded: a spec that passes [`TopologySpec::validate`] will not hit
//! structural surprises later.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::QuantizerParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    SparseLinear,
    DenseQuantLinear,
    SparseConv,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerKind::SparseLinear => "sparse_linear",
            LayerKind::DenseQuantLinear => "dense_quant_linear",
            LayerKind::SparseConv => "sparse_conv",
        })
    }
}

fn default_table_gen_limit() -> u32 {
    24
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output neurons; for conv layers the output feature map count.
    pub neurons: usize,
    /// Synapses per neuron. Sparse linear layers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fan_in: Option<usize>,
    pub in_bit_width: u32,
    pub out_bit_width: u32,
    pub max_val_in: f64,
    pub max_val_out: f64,
    /// Weight grid width; dense quantized layers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_bit_width: Option<u32>,
    /// Weight grid range; dense quantized layers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_val_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<u32>,
    /// Live taps per depthwise kernel. Conv only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_fan_in: Option<usize>,
    /// Live channel taps per pointwise neuron. Conv only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointwise_fan_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_bit_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_max_val: Option<f64>,
    /// Conv only: layer sits on a single-channel primary input, so the
    /// depthwise stage instantiates one kernel per *output* map.
    #[serde(default)]
    pub first_layer: bool,
}

impl LayerSpec {
    pub fn in_params(&self) -> QuantizerParams {
        QuantizerParams { bit_width: self.in_bit_width, max_val: self.max_val_in }
    }

    pub fn out_params(&self) -> QuantizerParams {
        QuantizerParams { bit_width: self.out_bit_width, max_val: self.max_val_out }
    }

    pub fn intermediate_params(&self) -> Result<QuantizerParams> {
        Ok(QuantizerParams {
            bit_width: self
                .intermediate_bit_width
                .ok_or_else(|| Error::InvalidTopology("missing intermediate_bit_width".into()))?,
            max_val: self
                .intermediate_max_val
                .ok_or_else(|| Error::InvalidTopology("missing intermediate_max_val".into()))?,
        })
    }

    /// Address width of this layer's per-neuron truth table.
    pub fn fan_in_bits(&self) -> Result<u32> {
        let fan_in = self
            .fan_in
            .ok_or_else(|| Error::InvalidTopology(format!("{} layer has no fan_in", self.kind)))?;
        Ok(fan_in as u32 * self.in_bit_width)
    }

    /// Output length of a valid (unpadded) convolution along one dimension.
    pub fn conv_out_dim(dim: usize, k: u32, stride: u32) -> Result<usize> {
        if dim < k as usize {
            return Err(Error::InvalidTopology(format!(
                "spatial dim {dim} smaller than kernel size {k}"
            )));
        }
        Ok(1 + (dim - k as usize) / stride as usize)
    }

    /// Depthwise kernel count given the input channel count.
    pub fn depthwise_units(&self, in_channels: usize) -> usize {
        if self.first_layer {
            self.neurons
        } else {
            in_channels
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub input_features: usize,
    pub input_bit_width: u32,
    #[serde(default)]
    pub seed: u64,
    /// `[height, width, channels]`; required when the model starts with conv
    /// layers, and must flatten to `input_features`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<[usize; 3]>,
    pub layers: Vec<LayerSpec>,
    /// `(source, destination)` layer pairs; the source layer's quantized
    /// output is concatenated after the destination's main-path input.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skip_links: Vec<(usize, usize)>,
    /// Cap on per-neuron truth-table address width, in bits.
    #[serde(default = "default_table_gen_limit")]
    pub table_gen_limit: u32,
}

impl TopologySpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidTopology("no layers".into()));
        }
        if self.input_features == 0 {
            return Err(Error::InvalidTopology("input_features must be positive".into()));
        }
        QuantizerParams::new(self.input_bit_width, 1.0)?;
        if self.table_gen_limit == 0 {
            return Err(Error::InvalidTopology("table_gen_limit must be positive".into()));
        }

        // Conv layers must form a prefix: once the activation is flattened
        // for a linear layer there is no spatial grid to convolve again.
        let first_flat =
            self.layers.iter().position(|l| l.kind != LayerKind::SparseConv).unwrap_or(self.layers.len());
        if let Some(bad) =
            self.layers[first_flat..].iter().position(|l| l.kind == LayerKind::SparseConv)
        {
            return Err(Error::InvalidTopology(format!(
                "conv layer {} appears after a non-conv layer",
                first_flat + bad
            )));
        }
        let has_conv = first_flat > 0;
        match self.input_shape {
            Some([h, w, c]) => {
                if h * w * c != self.input_features {
                    return Err(Error::InvalidTopology(format!(
                        "input_shape {h}×{w}×{c} does not flatten to {} features",
                        self.input_features
                    )));
                }
                if h == 0 || w == 0 || c == 0 {
                    return Err(Error::InvalidTopology("input_shape dims must be positive".into()));
                }
            }
            None if has_conv => {
                return Err(Error::InvalidTopology(
                    "conv layers need an explicit input_shape".into(),
                ))
            }
            None => {}
        }

        self.validate_skip_links()?;
        let shapes = self.spatial_shapes()?;

        for (i, layer) in self.layers.iter().enumerate() {
            self.validate_layer(i, layer, &shapes)
                .map_err(|e| Error::InvalidTopology(format!("layer {i}: {e}")))?;
        }

        // Quantizers must chain: what one layer emits is exactly what the
        // next consumes, otherwise codes would need re-interpretation between
        // stages.
        if self.layers[0].in_bit_width != self.input_bit_width {
            return Err(Error::InvalidTopology(format!(
                "layer 0 consumes {}-bit inputs but the model input is {}-bit",
                self.layers[0].in_bit_width, self.input_bit_width
            )));
        }
        for i in 1..self.layers.len() {
            let prev = &self.layers[i - 1];
            let cur = &self.layers[i];
            if prev.out_bit_width != cur.in_bit_width || prev.max_val_out != cur.max_val_in {
                return Err(Error::InvalidTopology(format!(
                    "layer {} emits ({} bits, max {}) but layer {} expects ({} bits, max {})",
                    i - 1,
                    prev.out_bit_width,
                    prev.max_val_out,
                    i,
                    cur.in_bit_width,
                    cur.max_val_in
                )));
            }
        }
        Ok(())
    }

    fn validate_skip_links(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for &(s, d) in &self.skip_links {
            if s >= d {
                return Err(Error::InvalidTopology(format!(
                    "skip link {s}->{d} must run forward"
                )));
            }
            if d >= self.layers.len() {
                return Err(Error::InvalidTopology(format!(
                    "skip link {s}->{d} points past the last layer"
                )));
            }
            if !seen.insert((s, d)) {
                return Err(Error::InvalidTopology(format!("duplicate skip link {s}->{d}")));
            }
            for end in [s, d] {
                if self.layers[end].kind == LayerKind::SparseConv {
                    return Err(Error::InvalidTopology(format!(
                        "skip link {s}->{d} touches conv layer {end}; skips connect flat layers only"
                    )));
                }
            }
            let src = &self.layers[s];
            let dst = &self.layers[d];
            if src.out_bit_width != dst.in_bit_width || src.max_val_out != dst.max_val_in {
                return Err(Error::InvalidTopology(format!(
                    "skip link {s}->{d} carries ({} bits, max {}) into a layer expecting ({} bits, max {})",
                    src.out_bit_width, src.max_val_out, dst.in_bit_width, dst.max_val_in
                )));
            }
        }
        Ok(())
    }

    fn validate_layer(
        &self,
        i: usize,
        layer: &LayerSpec,
        shapes: &[(usize, usize, usize)],
    ) -> Result<()> {
        if layer.neurons == 0 {
            return Err(Error::InvalidTopology("neuron count must be positive".into()));
        }
        layer.in_params().validate()?;
        layer.out_params().validate()?;

        let conv_only: [(&str, bool); 6] = [
            ("kernel_size", layer.kernel_size.is_some()),
            ("stride", layer.stride.is_some()),
            ("kernel_fan_in", layer.kernel_fan_in.is_some()),
            ("pointwise_fan_in", layer.pointwise_fan_in.is_some()),
            ("intermediate_bit_width", layer.intermediate_bit_width.is_some()),
            ("intermediate_max_val", layer.intermediate_max_val.is_some()),
        ];
        match layer.kind {
            LayerKind::SparseLinear | LayerKind::DenseQuantLinear => {
                for (name, present) in conv_only {
                    if present {
                        return Err(Error::InvalidTopology(format!(
                            "{name} is only valid on conv layers"
                        )));
                    }
                }
                if layer.first_layer {
                    return Err(Error::InvalidTopology(
                        "first_layer is only valid on conv layers".into(),
                    ));
                }
            }
            LayerKind::SparseConv => {}
        }

        match layer.kind {
            LayerKind::SparseLinear => {
                if layer.weight_bit_width.is_some() || layer.max_val_weight.is_some() {
                    return Err(Error::InvalidTopology(
                        "weight quantization fields are only valid on dense_quant_linear layers"
                            .into(),
                    ));
                }
                let fan_in = layer
                    .fan_in
                    .ok_or_else(|| Error::InvalidTopology("sparse_linear needs fan_in".into()))?;
                let width = self.feature_count_in(i)?;
                if fan_in == 0 || fan_in > width {
                    return Err(Error::InvalidTopology(format!(
                        "fan_in {fan_in} outside 1..={width}"
                    )));
                }
            }
            LayerKind::DenseQuantLinear => {
                if layer.fan_in.is_some() {
                    return Err(Error::InvalidTopology(
                        "dense_quant_linear has no fan_in; it is fully connected".into(),
                    ));
                }
                let bw = layer.weight_bit_width.ok_or_else(|| {
                    Error::InvalidTopology("dense_quant_linear needs weight_bit_width".into())
                })?;
                if bw < 2 {
                    // One bit cannot carry a symmetric signed grid with zero.
                    return Err(Error::InvalidTopology(format!(
                        "weight_bit_width {bw} must be at least 2"
                    )));
                }
                let max_w = layer.max_val_weight.ok_or_else(|| {
                    Error::InvalidTopology("dense_quant_linear needs max_val_weight".into())
                })?;
                QuantizerParams::new(bw, max_w)?;
            }
            LayerKind::SparseConv => {
                if layer.fan_in.is_some() {
                    return Err(Error::InvalidTopology(
                        "sparse_conv uses kernel_fan_in/pointwise_fan_in, not fan_in".into(),
                    ));
                }
                if layer.weight_bit_width.is_some() || layer.max_val_weight.is_some() {
                    return Err(Error::InvalidTopology(
                        "weight quantization fields are only valid on dense_quant_linear layers"
                            .into(),
                    ));
                }
                let k = layer
                    .kernel_size
                    .ok_or_else(|| Error::InvalidTopology("conv needs kernel_size".into()))?;
                let stride = layer
                    .stride
                    .ok_or_else(|| Error::InvalidTopology("conv needs stride".into()))?;
                if k == 0 || stride == 0 {
                    return Err(Error::InvalidTopology(
                        "kernel_size and stride must be positive".into(),
                    ));
                }
                layer.intermediate_params()?.validate()?;
                let (h, w, c) = shapes[i];
                if layer.first_layer && (i != 0 || c != 1) {
                    return Err(Error::InvalidTopology(
                        "first_layer requires conv layer 0 with a single input channel".into(),
                    ));
                }
                LayerSpec::conv_out_dim(h, k, stride)?;
                LayerSpec::conv_out_dim(w, k, stride)?;
                let x_k = layer
                    .kernel_fan_in
                    .ok_or_else(|| Error::InvalidTopology("conv needs kernel_fan_in".into()))?;
                if x_k == 0 || x_k > (k as usize).pow(2) {
                    return Err(Error::InvalidTopology(format!(
                        "kernel_fan_in {x_k} outside 1..={}",
                        (k as usize).pow(2)
                    )));
                }
                let x_s = layer
                    .pointwise_fan_in
                    .ok_or_else(|| Error::InvalidTopology("conv needs pointwise_fan_in".into()))?;
                let channels_mid = layer.depthwise_units(c);
                if x_s == 0 || x_s > channels_mid {
                    return Err(Error::InvalidTopology(format!(
                        "pointwise_fan_in {x_s} outside 1..={channels_mid}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-layer spatial input shape `(H, W, C)` along the conv prefix;
    /// entries for flat layers are zeroed and never consulted.
    pub fn spatial_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = vec![(0, 0, 0); self.layers.len()];
        let mut cur = self.input_shape.map(|[h, w, c]| (h, w, c));
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kind != LayerKind::SparseConv {
                break;
            }
            let (h, w, c) = cur.ok_or_else(|| {
                Error::InvalidTopology("conv layers need an explicit input_shape".into())
            })?;
            shapes[i] = (h, w, c);
            let k = layer
                .kernel_size
                .ok_or_else(|| Error::InvalidTopology("conv needs kernel_size".into()))?;
            let stride = layer
                .stride
                .ok_or_else(|| Error::InvalidTopology("conv needs stride".into()))?;
            let out_h = LayerSpec::conv_out_dim(h, k, stride)?;
            let out_w = LayerSpec::conv_out_dim(w, k, stride)?;
            cur = Some((out_h, out_w, layer.neurons));
        }
        Ok(shapes)
    }

    /// Scalar features the main path feeds into layer `i` (excluding skips):
    /// the flattened output of layer `i−1`, or the model input for layer 0.
    pub fn main_feature_count_in(&self, i: usize) -> Result<usize> {
        if i == 0 {
            Ok(self.input_features)
        } else {
            self.output_feature_count(i - 1)
        }
    }

    /// Total scalar features entering layer `i`: main path plus every skip
    /// source targeting `i`, in `skip_links` order.
    pub fn feature_count_in(&self, i: usize) -> Result<usize> {
        let mut count = self.main_feature_count_in(i)?;
        for s in self.skip_sources_into(i) {
            count += self.output_feature_count(s)?;
        }
        Ok(count)
    }

    /// Scalar features layer `i` produces; conv outputs flatten as C×H×W.
    pub fn output_feature_count(&self, i: usize) -> Result<usize> {
        let layer = &self.layers[i];
        match layer.kind {
            LayerKind::SparseLinear | LayerKind::DenseQuantLinear => Ok(layer.neurons),
            LayerKind::SparseConv => {
                let (h, w, _) = self.spatial_shapes()?[i];
                let k = layer.kernel_size.unwrap_or(0);
                let stride = layer.stride.unwrap_or(1);
                let out_h = LayerSpec::conv_out_dim(h, k, stride)?;
                let out_w = LayerSpec::conv_out_dim(w, k, stride)?;
                Ok(layer.neurons * out_h * out_w)
            }
        }
    }

    /// Wire width in bits entering layer `i` (features × input code width).
    pub fn sparse_input_bits(&self, i: usize) -> Result<usize> {
        Ok(self.feature_count_in(i)? * self.layers[i].in_bit_width as usize)
    }

    /// Skip sources feeding layer `i`, in declaration order. Their outputs
    /// are concatenated after the main path, in this order.
    pub fn skip_sources_into(&self, i: usize) -> Vec<usize> {
        self.skip_links.iter().filter(|&&(_, d)| d == i).map(|&(s, _)| s).collect()
    }
}

/// Per-neuron input selections for one sparse stage: row `n` lists, in
/// strictly ascending order, the input feature indices neuron `n` reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConnectivityMask {
    pub rows: Vec<Vec<usize>>,
}

impl ConnectivityMask {
    pub fn validate(&self, fan_in: usize, input_width: usize) -> Result<()> {
        for (n, row) in self.rows.iter().enumerate() {
            if row.len() != fan_in {
                return Err(Error::InvalidModel(format!(
                    "neuron {n} mask has {} entries, expected {fan_in}",
                    row.len()
                )));
            }
            if !row.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::InvalidModel(format!(
                    "neuron {n} mask is not strictly ascending"
                )));
            }
            if row.last().is_some_and(|&j| j >= input_width) {
                return Err(Error::InvalidModel(format!(
                    "neuron {n} mask index {} outside input width {input_width}",
                    row.last().unwrap()
                )));
            }
        }
        Ok(())
    }

    /// True iff `mask` could have been pruned out of `self` row by row.
    pub fn is_submask_of(&self, wider: &ConnectivityMask) -> bool {
        self.rows.len() == wider.rows.len()
            && self
                .rows
                .iter()
                .zip(&wider.rows)
                .all(|(narrow, wide)| narrow.iter().all(|j| wide.binary_search(j).is_ok()))
    }
}

/// Masks for one layer; the variant matches the layer kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerMasks {
    /// Dense layers read everything; nothing to record.
    Dense,
    Linear(ConnectivityMask),
    Conv { depthwise: ConnectivityMask, pointwise: ConnectivityMask },
}

/// Deterministic per-neuron PRNG.
///
/// The stream is keyed by `(seed, layer, stage, neuron)` so any neuron's
/// draws can be reproduced in isolation and inserting layers does not shift
/// the draws of the others. Stages 0/1 are mask sampling (main/pointwise),
/// 2/3 are the matching weight initializations.
pub(crate) fn neuron_rng(seed: u64, layer: usize, stage: u64, neuron: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(layer as u64).to_le_bytes());
    key[16..24].copy_from_slice(&stage.to_le_bytes());
    key[24..32].copy_from_slice(&(neuron as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Uniform random `count`-subset of `0..width`, ascending. Selection
/// sampling: walk the candidates once, admitting each with probability
/// (still needed)/(still available).
fn sample_subset(rng: &mut ChaCha8Rng, width: usize, count: usize) -> Vec<usize> {
    debug_assert!(count <= width);
    let mut out = Vec::with_capacity(count);
    let mut need = count;
    for j in 0..width {
        if need == 0 {
            break;
        }
        let available = (width - j) as u64;
        if rng.next_u64() % available < need as u64 {
            out.push(j);
            need -= 1;
        }
    }
    out
}

/// Draw every sparse stage's connectivity for a whole model.
pub fn init_random_masks(spec: &TopologySpec, seed: u64) -> Result<Vec<LayerMasks>> {
    spec.validate()?;
    let shapes = spec.spatial_shapes()?;
    let mut masks = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        masks.push(match layer.kind {
            LayerKind::DenseQuantLinear => LayerMasks::Dense,
            LayerKind::SparseLinear => {
                let width = spec.feature_count_in(i)?;
                let fan_in = layer.fan_in.expect("validated");
                let rows = (0..layer.neurons)
                    .map(|n| sample_subset(&mut neuron_rng(seed, i, 0, n), width, fan_in))
                    .collect();
                LayerMasks::Linear(ConnectivityMask { rows })
            }
            LayerKind::SparseConv => {
                let (_, _, c) = shapes[i];
                let k2 = (layer.kernel_size.expect("validated") as usize).pow(2);
                let x_k = layer.kernel_fan_in.expect("validated");
                let units = layer.depthwise_units(c);
                let depthwise = ConnectivityMask {
                    rows: (0..units)
                        .map(|u| sample_subset(&mut neuron_rng(seed, i, 0, u), k2, x_k))
                        .collect(),
                };
                let x_s = layer.pointwise_fan_in.expect("validated");
                let pointwise = ConnectivityMask {
                    rows: (0..layer.neurons)
                        .map(|n| sample_subset(&mut neuron_rng(seed, i, 1, n), units, x_s))
                        .collect(),
                };
                LayerMasks::Conv { depthwise, pointwise }
            }
        });
    }
    Ok(masks)
}

/// Layer-by-layer sparsity fractions that equalize parameter pressure across
/// layers of different widths: `1 − (n_prev + n_cur)/(n_prev · n_cur)`,
/// clamped into `[0, 1]` (tiny layers push the formula negative).
pub fn erdos_renyi_allocation(layer_widths: &[usize]) -> Result<Vec<f64>> {
    if layer_widths.len() < 2 {
        return Err(Error::InvalidArg("need at least two layer widths".into()));
    }
    if let Some(pos) = layer_widths.iter().position(|&w| w == 0) {
        return Err(Error::InvalidArg(format!("layer width {pos} is zero")));
    }
    Ok(layer_widths
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0] as f64, w[1] as f64);
            let s = 1.0 - (a + b) / (a * b);
            if !(0.0..=1.0).contains(&s) {
                log::warn!("degenerate layer pair ({a}, {b}): sparsity {s} clamped into [0, 1]");
            }
            s.clamp(0.0, 1.0)
        })
        .collect())
}

/// How many copies of a network with `n2` neurons of `b2`-bit activations
/// fit in the budget of one with `n1` neurons of `b1`-bit activations.
pub fn ensemble_ratio(n1: usize, b1: u32, n2: usize, b2: u32) -> Result<f64> {
    if n1 == 0 || n2 == 0 || b1 == 0 || b2 == 0 {
        return Err(Error::InvalidArg("ensemble ratio arguments must be positive".into()));
    }
    Ok(n2 as f64 * 2f64.powi(b2 as i32 - b1 as i32) / n1 as f64)
}


#[cfg(test)]
mod tests {
    use super::testutil::linear_layer;
    use super::*;
    use proptest::prelude::*;

    fn mlp(input_features: usize, widths_fan_ins: &[(usize, usize)], bits: u32) -> TopologySpec {
        TopologySpec {
            input_features,
            input_bit_width: bits,
            seed: 7,
            input_shape: None,
            layers: widths_fan_ins.iter().map(|&(n, f)| linear_layer(n, f, bits)).collect(),
            skip_links: vec![],
            table_gen_limit: 24,
        }
    }

    #[test]
    fn full_fan_in_yields_the_only_possible_mask() {
        let spec = mlp(3, &[(4, 3)], 1);
        let masks = init_random_masks(&spec, 99).unwrap();
        let LayerMasks::Linear(m) = &masks[0] else { panic!("expected linear masks") };
        for row in &m.rows {
            assert_eq!(row, &vec![0, 1, 2]);
        }
    }

    #[test]
    fn mask_init_is_deterministic() {
        let spec = mlp(5, &[(6, 3), (4, 2)], 1);
        assert_eq!(init_random_masks(&spec, 42).unwrap(), init_random_masks(&spec, 42).unwrap());
        assert_ne!(init_random_masks(&spec, 42).unwrap(), init_random_masks(&spec, 43).unwrap());
    }

    #[test]
    fn wide_layer_masks_are_valid_subsets() {
        let spec = mlp(784, &[(512, 6)], 2);
        let masks = init_random_masks(&spec, 1).unwrap();
        let LayerMasks::Linear(m) = &masks[0] else { panic!("expected linear masks") };
        assert_eq!(m.rows.len(), 512);
        m.validate(6, 784).unwrap();
        // Not all neurons should land on the same support.
        assert!(m.rows.iter().any(|r| r != &m.rows[0]));
    }

    #[test]
    fn fan_in_beyond_width_is_rejected() {
        let spec = mlp(4, &[(2, 5)], 1);
        assert!(matches!(init_random_masks(&spec, 0), Err(Error::InvalidTopology(_))));
    }

    #[test]
    fn subset_sampling_is_uniformish() {
        // Every index of 0..6 should be hit roughly 1000·(3/6) times over
        // 1000 draws of 3-subsets; a gross skew means the sampler is broken.
        let mut counts = [0usize; 6];
        for n in 0..1000 {
            let mut rng = neuron_rng(5, 0, 0, n);
            for j in sample_subset(&mut rng, 6, 3) {
                counts[j] += 1;
            }
        }
        for c in counts {
            assert!((380..=620).contains(&c), "counts {counts:?}");
        }
    }

    #[test]
    fn erdos_renyi_matches_direct_evaluation() {
        assert_eq!(erdos_renyi_allocation(&[4, 4]).unwrap(), vec![0.5]);
        assert_eq!(erdos_renyi_allocation(&[64, 32]).unwrap(), vec![0.953125]);
        assert_eq!(erdos_renyi_allocation(&[4, 4, 4]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn erdos_renyi_clamps_degenerate_pairs() {
        // (1,1): 1 − 2/1 = −1, clamped to 0.
        assert_eq!(erdos_renyi_allocation(&[1, 1]).unwrap(), vec![0.0]);
    }

    #[test]
    fn erdos_renyi_rejects_bad_widths() {
        assert!(erdos_renyi_allocation(&[4]).is_err());
        assert!(erdos_renyi_allocation(&[4, 0]).is_err());
    }

    #[test]
    fn ensemble_ratio_direct_evaluations() {
        assert_eq!(ensemble_ratio(64, 6, 64, 6).unwrap(), 1.0);
        assert_eq!(ensemble_ratio(64, 6, 32, 8).unwrap(), 2.0);
        assert_eq!(ensemble_ratio(128, 10, 64, 6).unwrap(), 0.03125);
        assert!(ensemble_ratio(0, 6, 32, 8).is_err());
        assert!(ensemble_ratio(64, 0, 32, 8).is_err());
    }

    #[test]
    fn quantizer_chain_mismatch_is_rejected() {
        let mut spec = mlp(8, &[(4, 2), (3, 2)], 2);
        spec.layers[1].in_bit_width = 3; // breaks the chain
        assert!(spec.validate().is_err());
        let mut spec = mlp(8, &[(4, 2), (3, 2)], 2);
        spec.layers[0].max_val_out = 2.0;
        assert!(spec.validate().is_err());
        let mut spec = mlp(8, &[(4, 2)], 2);
        spec.input_bit_width = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn skip_links_widen_the_destination() {
        let mut spec = mlp(8, &[(4, 2), (4, 2), (4, 2)], 1);
        spec.skip_links = vec![(0, 2)];
        spec.validate().unwrap();
        assert_eq!(spec.feature_count_in(2).unwrap(), 8); // 4 main + 4 skip
        assert_eq!(spec.sparse_input_bits(2).unwrap(), 8);
        assert_eq!(spec.skip_sources_into(2), vec![0]);
        // Masks may land on skip features (indices 4..8).
        let masks = init_random_masks(&spec, 3).unwrap();
        let LayerMasks::Linear(m) = &masks[2] else { panic!("expected linear masks") };
        m.validate(2, 8).unwrap();
        assert!(m.rows.iter().flatten().any(|&j| j >= 4));
    }

    #[test]
    fn bad_skip_links_are_rejected() {
        let base = mlp(8, &[(4, 2), (4, 2), (4, 2)], 1);
        for (links, why) in [
            (vec![(2, 2)], "self loop"),
            (vec![(2, 0)], "backward"),
            (vec![(0, 9)], "out of range"),
            (vec![(0, 2), (0, 2)], "duplicate"),
        ] {
            let mut spec = base.clone();
            spec.skip_links = links;
            assert!(spec.validate().is_err(), "{why}");
        }
        // Mismatched quantizers across the skip.
        let mut spec = base;
        spec.layers[0].out_bit_width = 2;
        spec.layers[1].in_bit_width = 2;
        spec.layers[1].out_bit_width = 2;
        spec.layers[2].in_bit_width = 2;
        spec.input_bit_width = 1;
        spec.skip_links = vec![(0, 2)];
        // layer 0 emits 2-bit, layer 2 expects 2-bit: consistent chain...
        spec.validate().unwrap();
        // ...but a 1-bit source into the same destination is not.
        spec.layers[0].out_bit_width = 1;
        spec.layers[1].in_bit_width = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let mut spec = mlp(8, &[(4, 2), (4, 2), (4, 2)], 2);
        spec.skip_links = vec![(0, 2), (1, 2)];
        let json = serde_json::to_string_pretty(&spec).unwrap();
        let back: TopologySpec = serde_json::from_str(&json).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn table_gen_limit_defaults_when_absent() {
        let json = r#"{
            "input_features": 4,
            "input_bit_width": 1,
            "layers": [{
                "kind": "sparse_linear", "neurons": 2, "fan_in": 2,
                "in_bit_width": 1, "out_bit_width": 1,
                "max_val_in": 1.0, "max_val_out": 1.0
            }]
        }"#;
        let spec: TopologySpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.table_gen_limit, 24);
        assert_eq!(spec.seed, 0);
        spec.validate().unwrap();
    }

    #[test]
    fn conv_prefix_rule_is_enforced() {
        let conv = LayerSpec {
            kind: LayerKind::SparseConv,
            neurons: 4,
            fan_in: None,
            in_bit_width: 1,
            out_bit_width: 1,
            max_val_in: 1.0,
            max_val_out: 1.0,
            weight_bit_width: None,
            max_val_weight: None,
            kernel_size: Some(3),
            stride: Some(2),
            kernel_fan_in: Some(3),
            pointwise_fan_in: Some(2),
            intermediate_bit_width: Some(1),
            intermediate_max_val: Some(1.0),
            first_layer: true,
        };
        let spec = TopologySpec {
            input_features: 28 * 28,
            input_bit_width: 1,
            seed: 0,
            input_shape: Some([28, 28, 1]),
            layers: vec![conv.clone(), linear_layer(3, 2, 1)],
            skip_links: vec![],
            table_gen_limit: 24,
        };
        spec.validate().unwrap();
        // 28,k=3,s=2 → 13×13 spatial, 4 maps → 676 flat features.
        assert_eq!(spec.output_feature_count(0).unwrap(), 4 * 13 * 13);
        assert_eq!(spec.feature_count_in(1).unwrap(), 676);

        let mut flipped = spec.clone();
        flipped.layers.reverse();
        flipped.layers[1].first_layer = false; // still misplaced
        assert!(flipped.validate().is_err());

        let mut no_shape = spec.clone();
        no_shape.input_shape = None;
        assert!(no_shape.validate().is_err());

        let mut tiny = spec.clone();
        tiny.input_shape = Some([2, 392, 1]); // H < k
        assert!(tiny.validate().is_err());

        let mut misflagged = spec;
        misflagged.layers[0].first_layer = false;
        // X_s=2 > 1 depthwise unit once the flag is off.
        assert!(misflagged.validate().is_err());
    }

    #[test]
    fn conv_mask_shapes_follow_the_stage_structure() {
        let conv = LayerSpec {
            kind: LayerKind::SparseConv,
            neurons: 5,
            fan_in: None,
            in_bit_width: 1,
            out_bit_width: 1,
            max_val_in: 1.0,
            max_val_out: 1.0,
            weight_bit_width: None,
            max_val_weight: None,
            kernel_size: Some(3),
            stride: Some(1),
            kernel_fan_in: Some(4),
            pointwise_fan_in: Some(3),
            intermediate_bit_width: Some(2),
            intermediate_max_val: Some(3.0),
            first_layer: true,
        };
        let spec = TopologySpec {
            input_features: 36,
            input_bit_width: 1,
            seed: 0,
            input_shape: Some([6, 6, 1]),
            layers: vec![conv],
            skip_links: vec![],
            table_gen_limit: 24,
        };
        let masks = init_random_masks(&spec, 11).unwrap();
        let LayerMasks::Conv { depthwise, pointwise } = &masks[0] else {
            panic!("expected conv masks")
        };
        assert_eq!(depthwise.rows.len(), 5); // first_layer: one kernel per map
        depthwise.validate(4, 9).unwrap();
        assert_eq!(pointwise.rows.len(), 5);
        pointwise.validate(3, 5).unwrap();
    }

    #[test]
    fn mask_validation_catches_malformed_rows() {
        let ok = ConnectivityMask { rows: vec![vec![0, 2, 4], vec![1, 2, 3]] };
        ok.validate(3, 5).unwrap();
        assert!(ConnectivityMask { rows: vec![vec![0, 2]] }.validate(3, 5).is_err());
        assert!(ConnectivityMask { rows: vec![vec![2, 2, 4]] }.validate(3, 5).is_err());
        assert!(ConnectivityMask { rows: vec![vec![4, 2, 0]] }.validate(3, 5).is_err());
        assert!(ConnectivityMask { rows: vec![vec![0, 2, 5]] }.validate(3, 5).is_err());
    }

    #[test]
    fn submask_relation() {
        let wide = ConnectivityMask { rows: vec![vec![0, 2, 4], vec![1, 2, 3]] };
        let narrow = ConnectivityMask { rows: vec![vec![0, 4], vec![2, 3]] };
        assert!(narrow.is_submask_of(&wide));
        let off = ConnectivityMask { rows: vec![vec![0, 3], vec![2, 3]] };
        assert!(!off.is_submask_of(&wide));
    }

    proptest! {
        #[test]
        fn sampled_masks_are_ascending_unique_and_sized(
            width in 1usize..64,
            seed in any::<u64>(),
            neurons in 1usize..16,
        ) {
            let fan_in = 1 + seed as usize % width;
            let spec = mlp(width, &[(neurons, fan_in)], 1);
            let masks = init_random_masks(&spec, seed).unwrap();
            let LayerMasks::Linear(m) = &masks[0] else { panic!() };
            prop_assert!(m.validate(fan_in, width).is_ok());
        }

        #[test]
        fn erdos_renyi_stays_in_unit_interval(widths in proptest::collection::vec(1usize..512, 2..6)) {
            for s in erdos_renyi_allocation(&widths).unwrap() {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }
}
