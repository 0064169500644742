//! Analytical hardware-cost formulas.
//!
//! Everything in here predicts how many 6:1 LUTs a synthesized design will
//! need, before any RTL exists. The core quantity is the cost of one
//! exhaustive truth table with `N` input bits and `M` output bits; layer and
//! whole-model reports are sums of that primitive over neurons.

use crate::error::{Error, Result};
use crate::topology::{LayerKind, LayerSpec, TopologySpec};

/// Exact LUT count for an `N`-input, `M`-output-bit truth table.
///
/// For `N ≥ 6` this is the closed form `M·(2^(N−4) − (−1)^N)/3`, which is
/// always an exact integer because `2^(N−4) ≡ (−1)^N (mod 3)`. Below the
/// 6-input base a single physical LUT per output bit suffices.
pub fn lut_cost_closed(n_bits: u32, m_bits: u32) -> Result<u64> {
    check_lut_args(n_bits, m_bits)?;
    if n_bits < 6 {
        return Ok(m_bits as u64);
    }
    let p = 1u128
        .checked_shl(n_bits - 4)
        .ok_or_else(|| Error::InvalidArg(format!("fan-in of {n_bits} bits overflows")))?;
    let per_bit = if n_bits % 2 == 0 { (p - 1) / 3 } else { (p + 1) / 3 };
    u64::try_from(per_bit * m_bits as u128)
        .map_err(|_| Error::InvalidArg(format!("LUT count for {n_bits} input bits overflows")))
}

/// Same quantity, evaluated by unrolling the recurrence
/// `LUT(N) = 2·LUT(N−1) − (−1)^N` from the base `LUT(6) = 1`.
///
/// Kept as an independently-derived oracle for [`lut_cost_closed`].
pub fn lut_cost_recursive(n_bits: u32, m_bits: u32) -> Result<u64> {
    check_lut_args(n_bits, m_bits)?;
    if n_bits < 6 {
        return Ok(m_bits as u64);
    }
    let mut per_bit: u128 = 1;
    for n in 7..=n_bits {
        let sign: i128 = if n % 2 == 0 { 1 } else { -1 };
        per_bit = (2 * per_bit as i128 - sign)
            .try_into()
            .map_err(|_| Error::InvalidArg(format!("LUT count for {n_bits} bits overflows")))?;
    }
    u64::try_from(per_bit * m_bits as u128)
        .map_err(|_| Error::InvalidArg(format!("LUT count for {n_bits} input bits overflows")))
}

/// Floating-point version of [`lut_cost_closed`] for address widths far past
/// anything synthesizable (e.g. the hypothetical fully-unfolded dense
/// convolution); may legitimately return `inf`.
pub fn lut_cost_closed_f64(n_bits: u64, m_bits: f64) -> f64 {
    if n_bits < 6 {
        return m_bits;
    }
    let p = 2.0f64.powi((n_bits - 4).min(i32::MAX as u64) as i32);
    let sign = if n_bits % 2 == 0 { 1.0 } else { -1.0 };
    m_bits * (p - sign) / 3.0
}

fn check_lut_args(n_bits: u32, m_bits: u32) -> Result<()> {
    if n_bits == 0 || m_bits == 0 {
        return Err(Error::InvalidArg(format!(
            "LUT cost needs positive input and output bit counts, got ({n_bits}, {m_bits})"
        )));
    }
    Ok(())
}

/// One row of the static mapping table: how a single `fan_in`-bit truth
/// table spreads over 6:1 LUTs and how much of the consumed configuration
/// memory it actually uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Static6LutMap {
    pub lut_count: u64,
    pub truth_table_bits: u64,
    pub config_bits: u64,
    /// Fraction of configuration bits holding real table content.
    pub utilization: f64,
}

pub fn static_6lut_map(fan_in: u32) -> Result<Static6LutMap> {
    let lut_count = lut_cost_closed(fan_in, 1)?;
    let truth_table_bits = 1u64
        .checked_shl(fan_in)
        .ok_or_else(|| Error::InvalidArg(format!("2^{fan_in} table bits overflow")))?;
    let config_bits = 64 * lut_count;
    Ok(Static6LutMap {
        lut_count,
        truth_table_bits,
        config_bits,
        utilization: truth_table_bits as f64 / config_bits as f64,
    })
}

/// Fitted LUT cost of a dense quantized linear layer:
/// `nO·(nI·BW_in·BW_wt·1.0699 + 10.779)`.
pub fn dense_quant_linear_cost(n_out: u64, n_in: u64, bw_in: u32, bw_wt: u32) -> f64 {
    n_out as f64 * (n_in as f64 * bw_in as f64 * bw_wt as f64 * 1.0699 + 10.779)
}

/// LUT costs of one convolutional layer under three implementations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvCosts {
    /// Hypothetical fully-unfolded dense convolution (usually astronomical).
    pub dense: f64,
    pub depthwise: f64,
    pub pointwise: f64,
}

/// Cost of a convolutional layer producing `outpix` output pixels of
/// `o_bits` each across `n_ofm` feature maps, reading `n_ifm` maps through
/// `k×k` kernels of `i_bits` inputs, with `x_k` live depthwise taps and
/// `x_s` live pointwise taps.
#[allow(clippy::too_many_arguments)]
pub fn conv_costs(
    outpix: u64,
    o_bits: u32,
    n_ofm: u64,
    n_ifm: u64,
    k: u32,
    i_bits: u32,
    x_k: u64,
    x_s: u64,
) -> Result<ConvCosts> {
    for (name, v) in [
        ("outpix", outpix),
        ("o_bits", o_bits as u64),
        ("n_ofm", n_ofm),
        ("n_ifm", n_ifm),
        ("k", k as u64),
        ("i_bits", i_bits as u64),
        ("x_k", x_k),
        ("x_s", x_s),
    ] {
        if v == 0 {
            return Err(Error::InvalidArg(format!("conv cost argument {name} must be positive")));
        }
    }
    let scale = outpix as f64 * o_bits as f64 * n_ofm as f64;
    let per = |n: u64| lut_cost_closed_f64(n, 1.0);
    Ok(ConvCosts {
        dense: scale * per(n_ifm * (k as u64).pow(2) * i_bits as u64),
        depthwise: scale * per(x_k * i_bits as u64),
        pointwise: scale * per(x_s * i_bits as u64),
    })
}

/// Per-layer entry of a cost report.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCost {
    SparseLinear { luts: u64 },
    DenseQuantLinear { luts: f64 },
    SparseConv { costs: ConvCosts },
}

impl LayerCost {
    /// LUTs the layer contributes to the implemented design. Conv layers are
    /// built in factorized form, so the dense estimate is informational only.
    pub fn total(&self) -> f64 {
        match self {
            LayerCost::SparseLinear { luts } => *luts as f64,
            LayerCost::DenseQuantLinear { luts } => *luts,
            LayerCost::SparseConv { costs } => costs.depthwise + costs.pointwise,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutCostReport {
    pub layers: Vec<LayerCost>,
    pub total: f64,
}

/// Predict the LUT cost of every layer of a topology.
///
/// Works from the topology alone: the cost depends on connectivity shape and
/// bit widths, not on trained weights. Conv layers need the spatial input
/// dims, which the topology carries.
pub fn report(spec: &TopologySpec) -> Result<LutCostReport> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    let shapes = spec.spatial_shapes()?;
    for (i, layer) in spec.layers.iter().enumerate() {
        let cost = match layer.kind {
            LayerKind::SparseLinear => LayerCost::SparseLinear {
                luts: layer.neurons as u64
                    * lut_cost_closed(layer.fan_in_bits()?, layer.out_bit_width)?,
            },
            LayerKind::DenseQuantLinear => LayerCost::DenseQuantLinear {
                luts: dense_quant_linear_cost(
                    layer.neurons as u64,
                    spec.feature_count_in(i)? as u64,
                    layer.in_bit_width,
                    layer.weight_bit_width.ok_or_else(|| missing(i, "weight_bit_width"))?,
                ),
            },
            LayerKind::SparseConv => {
                let (h, w, c) = shapes[i];
                let k = layer.kernel_size.ok_or_else(|| missing(i, "kernel_size"))?;
                let stride = layer.stride.ok_or_else(|| missing(i, "stride"))?;
                let out_h = LayerSpec::conv_out_dim(h, k, stride)?;
                let out_w = LayerSpec::conv_out_dim(w, k, stride)?;
                LayerCost::SparseConv {
                    costs: conv_costs(
                        (out_h * out_w) as u64,
                        layer.out_bit_width,
                        layer.neurons as u64,
                        c as u64,
                        k,
                        layer.in_bit_width,
                        layer.kernel_fan_in.ok_or_else(|| missing(i, "kernel_fan_in"))? as u64,
                        layer.pointwise_fan_in.ok_or_else(|| missing(i, "pointwise_fan_in"))?
                            as u64,
                    )?,
                }
            }
        };
        layers.push(cost);
    }
    let total = layers.iter().map(LayerCost::total).sum();
    Ok(LutCostReport { layers, total })
}

fn missing(layer: usize, field: &str) -> Error {
    Error::InvalidTopology(format!("layer {layer} is missing {field}"))
}
