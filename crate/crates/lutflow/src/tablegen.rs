//! Exhaustive truth tables for trained neurons.
//!
//! After training, every neuron is a pure function from its few quantized
//! input codes to one quantized output code, so it can be enumerated
//! completely: decode each input row, run dot-product → batch norm →
//! downstream quantizer, store the output code. The bit-order convention is
//! load-bearing and must match the netlist stage exactly: ascending mask
//! index = most-significant field of the row index, MSB-first within each
//! multi-bit field.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{quantize_weight, BatchNorm, LayerParams, Model};
use crate::quantizer::{code_to_bits, quantize_code, value_of, QuantizerParams};
use crate::topology::{ConnectivityMask, LayerSpec};

/// One neuron's exhaustive table: output code per packed input row index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthTable {
    /// Input feature indices this neuron reads, ascending. The first tap is
    /// the most significant field of the row index.
    pub taps: Vec<usize>,
    /// Bits per tap field (the input quantizer's width).
    pub field_bits: u32,
    /// Output code width.
    pub out_bits: u32,
    data: TableData,
}

/// Dense output storage; nearly all real tables fit in a byte per row.
#[derive(Debug, Clone, PartialEq, Eq)]
enum TableData {
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl TruthTable {
    fn from_codes(taps: Vec<usize>, field_bits: u32, out_bits: u32, codes: Vec<u32>) -> Self {
        let data = if out_bits <= 8 {
            TableData::U8(codes.into_iter().map(|c| c as u8).collect())
        } else {
            TableData::U32(codes)
        };
        TruthTable { taps, field_bits, out_bits, data }
    }

    /// Address width of the table: taps × bits per tap.
    pub fn address_bits(&self) -> u32 {
        self.taps.len() as u32 * self.field_bits
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TableData::U8(v) => v.len(),
            TableData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn lookup(&self, row: usize) -> u32 {
        match &self.data {
            TableData::U8(v) => v[row] as u32,
            TableData::U32(v) => v[row],
        }
    }
}

/// Tables for every neuron of one stage, in neuron order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTables {
    pub neurons: Vec<Arc<TruthTable>>,
}

/// Tables for one model layer. Dense layers tabulate like sparse ones with
/// full-width taps (weights pre-quantized onto their grid).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TablesEntry {
    Linear(LayerTables),
    Conv { depthwise: LayerTables, pointwise: LayerTables },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelTables {
    pub layers: Vec<TablesEntry>,
}

/// One tabulatable stage: a sparse weight matrix behind an input quantizer,
/// batch norm, and the quantizer whose codes the table must emit.
pub struct NeuronStage<'a> {
    pub weights: &'a [Vec<f64>],
    pub mask: &'a ConnectivityMask,
    pub bn: &'a BatchNorm,
    pub in_params: QuantizerParams,
    /// The next quantizer in the forward path — its codes are the table's
    /// output alphabet.
    pub downstream: QuantizerParams,
}

/// Pack per-tap codes into a row index: ascending tap order fills from the
/// most significant field down.
#[inline]
pub fn pack_row<I: IntoIterator<Item = u32>>(codes: I, field_bits: u32) -> usize {
    let mut row = 0usize;
    for c in codes {
        row = (row << field_bits) | c as usize;
    }
    row
}

/// Enumerate one neuron of a stage.
pub fn tabulate_neuron(stage: &NeuronStage<'_>, n: usize, limit: u32) -> Result<TruthTable> {
    let taps = &stage.mask.rows[n];
    let b = stage.in_params.bit_width;
    let address_bits = taps.len() as u32 * b;
    if address_bits > limit {
        return Err(Error::TableLimit { bits: address_bits as usize, limit: limit as usize });
    }
    // Per-tap contribution of each code: w·value(code). The row loop then
    // only extracts fields and adds.
    let levels = stage.in_params.num_levels();
    let contrib: Vec<Vec<f64>> = taps
        .iter()
        .map(|&j| {
            (0..levels)
                .map(|c| stage.weights[n][j] * value_of(c, &stage.in_params).expect("in range"))
                .collect()
        })
        .collect();
    let field_mask = (levels - 1) as usize;
    let rows = 1usize << address_bits;
    let mut codes = Vec::with_capacity(rows);
    for row in 0..rows {
        let mut acc = 0.0;
        for (t, c) in contrib.iter().enumerate() {
            let shift = b as usize * (taps.len() - 1 - t);
            acc += c[(row >> shift) & field_mask];
        }
        codes.push(quantize_code(stage.bn.apply(n, acc), &stage.downstream));
    }
    Ok(TruthTable::from_codes(taps.clone(), b, stage.downstream.bit_width, codes))
}

/// Enumerate every neuron of a stage, in parallel, results in neuron order.
pub fn generate_truth_table(stage: &NeuronStage<'_>, limit: u32) -> Result<LayerTables> {
    let neurons = (0..stage.mask.rows.len())
        .into_par_iter()
        .map(|n| tabulate_neuron(stage, n, limit).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerTables { neurons })
}

/// Tables for model layer `i`.
pub fn generate_layer_tables(model: &Model, i: usize) -> Result<TablesEntry> {
    let spec_layer = &model.spec.layers[i];
    let limit = model.spec.table_gen_limit;
    match (&model.layers[i], spec_layer.kind) {
        (LayerParams::SparseLinear { weights, mask, bn }, _) => {
            Ok(TablesEntry::Linear(generate_truth_table(
                &NeuronStage {
                    weights,
                    mask,
                    bn,
                    in_params: spec_layer.in_params(),
                    downstream: spec_layer.out_params(),
                },
                limit,
            )?))
        }
        (LayerParams::DenseQuantLinear { weights, bn }, _) => {
            // A dense layer is a sparse layer with full support; its weights
            // enter the table on their quantization grid, as in the forward
            // pass.
            let width = model.spec.feature_count_in(i)?;
            let wq = dense_weight_params(spec_layer)?;
            let quantized: Vec<Vec<f64>> = weights
                .iter()
                .map(|row| {
                    row.iter().map(|&w| quantize_weight(w, wq.bit_width, wq.max_val)).collect()
                })
                .collect();
            let full = ConnectivityMask { rows: vec![(0..width).collect(); weights.len()] };
            Ok(TablesEntry::Linear(generate_truth_table(
                &NeuronStage {
                    weights: &quantized,
                    mask: &full,
                    bn,
                    in_params: spec_layer.in_params(),
                    downstream: spec_layer.out_params(),
                },
                limit,
            )?))
        }
        (LayerParams::SparseConv(p), _) => {
            let depthwise = generate_truth_table(
                &NeuronStage {
                    weights: &p.depthwise_weights,
                    mask: &p.depthwise_mask,
                    bn: &p.depthwise_bn,
                    in_params: spec_layer.in_params(),
                    downstream: spec_layer.intermediate_params()?,
                },
                limit,
            )?;
            let pointwise = generate_truth_table(
                &NeuronStage {
                    weights: &p.pointwise_weights,
                    mask: &p.pointwise_mask,
                    bn: &p.pointwise_bn,
                    in_params: spec_layer.intermediate_params()?,
                    downstream: spec_layer.out_params(),
                },
                limit,
            )?;
            Ok(TablesEntry::Conv { depthwise, pointwise })
        }
    }
}

fn dense_weight_params(layer: &LayerSpec) -> Result<QuantizerParams> {
    Ok(QuantizerParams {
        bit_width: layer
            .weight_bit_width
            .ok_or_else(|| Error::InvalidTopology("missing weight_bit_width".into()))?,
        max_val: layer
            .max_val_weight
            .ok_or_else(|| Error::InvalidTopology("missing max_val_weight".into()))?,
    })
}

/// Tables for every layer of the model.
pub fn generate_model_tables(model: &Model) -> Result<ModelTables> {
    model.validate()?;
    let layers = (0..model.layers.len())
        .map(|i| generate_layer_tables(model, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelTables { layers })
}

/// Forward pass through the tables alone: codes in, codes out. Must agree
/// with the float pipeline bit for bit.
pub fn table_forward(model: &Model, tables: &ModelTables, input: &[u32]) -> Result<Vec<u32>> {
    if input.len() != model.spec.input_features {
        return Err(Error::InvalidArg(format!(
            "table forward expects {} input codes, got {}",
            model.spec.input_features,
            input.len()
        )));
    }
    let in_levels = model.spec.layers[0].in_params().num_levels();
    if let Some(&bad) = input.iter().find(|&&c| c >= in_levels) {
        return Err(Error::InvalidArg(format!("input code {bad} exceeds the input alphabet")));
    }
    if tables.layers.len() != model.layers.len() {
        return Err(Error::Mismatch(format!(
            "tables cover {} layers, model has {}",
            tables.layers.len(),
            model.layers.len()
        )));
    }
    let shapes = model.spec.spatial_shapes()?;
    let mut outputs: Vec<Vec<u32>> = Vec::with_capacity(model.layers.len());
    for (i, entry) in tables.layers.iter().enumerate() {
        let main = if i == 0 { input } else { &outputs[i - 1] };
        let mut x = main.to_vec();
        for s in model.spec.skip_sources_into(i) {
            x.extend_from_slice(&outputs[s]);
        }
        let out = match entry {
            TablesEntry::Linear(tables) => linear_table_forward(tables, &x),
            TablesEntry::Conv { depthwise, pointwise } => conv_table_forward(
                &model.spec.layers[i],
                depthwise,
                pointwise,
                shapes[i],
                &x,
            )?,
        };
        outputs.push(out);
    }
    Ok(outputs.pop().expect("models have at least one layer"))
}

fn linear_table_forward(tables: &LayerTables, x: &[u32]) -> Vec<u32> {
    tables
        .neurons
        .iter()
        .map(|t| t.lookup(pack_row(t.taps.iter().map(|&j| x[j]), t.field_bits)))
        .collect()
}

/// Slide the table-driven conv stages across an image of codes. The window
/// arithmetic mirrors the float path; this is the verification slow path.
pub fn conv_table_forward(
    layer: &LayerSpec,
    depthwise: &LayerTables,
    pointwise: &LayerTables,
    shape: (usize, usize, usize),
    codes: &[u32],
) -> Result<Vec<u32>> {
    let (h, w, c) = shape;
    if codes.len() != h * w * c {
        return Err(Error::InvalidArg(format!(
            "conv table forward expects {} codes for a {h}×{w}×{c} image, got {}",
            h * w * c,
            codes.len()
        )));
    }
    let k = layer
        .kernel_size
        .ok_or_else(|| Error::InvalidTopology("conv needs kernel_size".into()))?
        as usize;
    let stride = layer
        .stride
        .ok_or_else(|| Error::InvalidTopology("conv needs stride".into()))?
        as usize;
    let out_h = LayerSpec::conv_out_dim(h, k as u32, stride as u32)?;
    let out_w = LayerSpec::conv_out_dim(w, k as u32, stride as u32)?;
    let units = depthwise.neurons.len();
    let pix = out_h * out_w;

    let mut mid = vec![0u32; units * pix];
    for (u, table) in depthwise.neurons.iter().enumerate() {
        let ch = if layer.first_layer { 0 } else { u };
        let plane = &codes[ch * h * w..(ch + 1) * h * w];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let row = pack_row(
                    table.taps.iter().map(|&m| {
                        plane[(oh * stride + m / k) * w + (ow * stride + m % k)]
                    }),
                    table.field_bits,
                );
                mid[u * pix + oh * out_w + ow] = table.lookup(row);
            }
        }
    }
    let mut out = vec![0u32; pointwise.neurons.len() * pix];
    for (n, table) in pointwise.neurons.iter().enumerate() {
        for px in 0..pix {
            let row =
                pack_row(table.taps.iter().map(|&u| mid[u * pix + px]), table.field_bits);
            out[n * pix + px] = table.lookup(row);
        }
    }
    Ok(out)
}

/// Serialized layer-table structure: neuron-id keys in order, each holding
/// the aligned input/output bit-string lists.
pub fn layer_tables_to_json(tables: &LayerTables) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (n, t) in tables.neurons.iter().enumerate() {
        let k = t.address_bits();
        let inputs: Vec<serde_json::Value> =
            (0..t.len()).map(|row| code_to_bits(row as u32, k).into()).collect();
        let outputs: Vec<serde_json::Value> =
            (0..t.len()).map(|row| code_to_bits(t.lookup(row), t.out_bits).into()).collect();
        map.insert(n.to_string(), serde_json::json!([inputs, outputs]));
    }
    serde_json::Value::Object(map)
}

pub fn tables_entry_to_json(entry: &TablesEntry) -> serde_json::Value {
    match entry {
        TablesEntry::Linear(t) => layer_tables_to_json(t),
        TablesEntry::Conv { depthwise, pointwise } => serde_json::json!({
            "dw": layer_tables_to_json(depthwise),
            "pt": layer_tables_to_json(pointwise),
        }),
    }
}
