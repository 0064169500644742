//! Scalar activation quantizers.
//!
//! Every layer boundary in a model carries one of these. A 1-bit quantizer is
//! a sign function onto `{-max_val, +max_val}`; wider quantizers are unsigned
//! uniform grids over `[0, max_val]` (the rectifier is folded into the
//! clamp). Codes are the grid indices, and the netlist stage later treats a
//! code as a little bundle of wires, so everything here must be exact: a
//! quantized value is *defined* as `value_of(code_of(x))`, never as something
//! merely close to it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack allowed when snapping an already-quantized value back onto
/// its grid index. Forward passes reproduce grid values exactly; this only
/// absorbs the one-ulp wobble of values that round-tripped through JSON.
pub const GRID_TOLERANCE: f64 = 1e-9;

/// Widest supported code. Beyond this the exhaustive stages downstream are
/// hopeless anyway, and `1 << bits` arithmetic stays comfortably in range.
pub const MAX_BIT_WIDTH: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerParams {
    pub bit_width: u32,
    pub max_val: f64,
}

impl QuantizerParams {
    pub fn new(bit_width: u32, max_val: f64) -> Result<Self> {
        let p = QuantizerParams { bit_width, max_val };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bit_width < 1 || self.bit_width > MAX_BIT_WIDTH {
            return Err(Error::InvalidArg(format!(
                "quantizer bit width {} outside 1..={}",
                self.bit_width, MAX_BIT_WIDTH
            )));
        }
        if !(self.max_val.is_finite() && self.max_val > 0.0) {
            return Err(Error::InvalidArg(format!(
                "quantizer max_val {} must be finite and positive",
                self.max_val
            )));
        }
        Ok(())
    }

    /// Number of representable levels.
    pub fn num_levels(&self) -> u32 {
        1u32 << self.bit_width
    }

    /// Grid step between adjacent levels. For 1 bit the two levels are
    /// `±max_val`, so the step is `2·max_val`.
    pub fn step(&self) -> f64 {
        if self.bit_width == 1 {
            2.0 * self.max_val
        } else {
            self.max_val / (self.num_levels() - 1) as f64
        }
    }

    /// Inclusive range over which the straight-through estimator passes
    /// gradient: the interval actually covered by the grid.
    pub fn active_range(&self) -> (f64, f64) {
        if self.bit_width == 1 {
            (-self.max_val, self.max_val)
        } else {
            (0.0, self.max_val)
        }
    }

    /// Scale factor dividing every representable value into a small signed
    /// integer: `±max_val/scale = ±1` for 1 bit, `value/scale = code` above.
    pub fn scale(&self) -> f64 {
        if self.bit_width == 1 {
            self.max_val
        } else {
            self.step()
        }
    }
}

/// A quantized vector in dequantized representation: real values that are
/// all exact small-integer multiples of `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub values: Vec<f64>,
    pub scale: f64,
    pub bit_width: u32,
}

/// Quantize a whole vector. Non-finite inputs are rejected: they mean the
/// upstream computation already diverged, and sign-of-NaN decisions would
/// silently bake garbage into truth tables.
pub fn quantize_tensor(xs: &[f64], p: &QuantizerParams) -> Result<QuantTensor> {
    if let Some(pos) = xs.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidArg(format!(
            "non-finite activation {} at index {pos}",
            xs[pos]
        )));
    }
    Ok(QuantTensor {
        values: xs.iter().map(|&x| quantize(x, p)).collect(),
        scale: p.scale(),
        bit_width: p.bit_width,
    })
}

/// Quantize a pre-activation onto the grid.
///
/// 1-bit: sign function, with the tie at zero resolved towards `+max_val`.
/// Multi-bit: round to the nearest level of `[0, max_val]`, clamping outside
/// values (halfway points round away from zero, i.e. up).
pub fn quantize(x: f64, p: &QuantizerParams) -> f64 {
    value_of(quantize_code(x, p), p).expect("code from quantize_code is always in range")
}

/// Same as [`quantize`] but returns the grid index instead of the value.
pub fn quantize_code(x: f64, p: &QuantizerParams) -> u32 {
    if p.bit_width == 1 {
        return if x >= 0.0 { 1 } else { 0 };
    }
    let top = (p.num_levels() - 1) as f64;
    let q = (x / p.step()).round().clamp(0.0, top);
    q as u32
}

/// Reconstruct the value a code stands for.
pub fn value_of(code: u32, p: &QuantizerParams) -> Result<f64> {
    if code >= p.num_levels() {
        return Err(Error::InvalidArg(format!(
            "code {} out of range for {} bits",
            code, p.bit_width
        )));
    }
    if p.bit_width == 1 {
        Ok(if code == 1 { p.max_val } else { -p.max_val })
    } else {
        Ok(code as f64 * p.step())
    }
}

/// Map an on-grid value back to its code. Values that are not on the grid
/// (beyond a tiny relative tolerance) are an error: feeding an unquantized
/// activation into a table lookup is always a bug upstream.
pub fn code_of(value: f64, p: &QuantizerParams) -> Result<u32> {
    let code = quantize_code(value, p);
    let level = value_of(code, p)?;
    let tol = GRID_TOLERANCE * p.max_val.abs().max(1.0);
    if (value - level).abs() > tol {
        return Err(Error::InvalidArg(format!(
            "value {value} is not on the {}-bit grid with max {}",
            p.bit_width, p.max_val
        )));
    }
    Ok(code)
}

/// Straight-through estimator: pass the upstream gradient wherever the input
/// lies inside the grid's active range (inclusive at both ends), zero it
/// elsewhere.
pub fn quantize_ste_grad(x: f64, p: &QuantizerParams, upstream: f64) -> f64 {
    if ste_gate(x, p) {
        upstream
    } else {
        0.0
    }
}

/// The indicator behind [`quantize_ste_grad`], shared with the surrogate
/// (clamp-only) forward pass so both modes gate identically.
pub fn ste_gate(x: f64, p: &QuantizerParams) -> bool {
    let (lo, hi) = p.active_range();
    x >= lo && x <= hi
}

/// Render a code as a binary string, most significant bit first, zero-padded
/// to the quantizer's width.
pub fn code_to_bits(code: u32, bit_width: u32) -> String {
    (0..bit_width)
        .rev()
        .map(|k| if code >> k & 1 == 1 { '1' } else { '0' })
        .collect()
}

/// Parse a binary string produced by [`code_to_bits`].
pub fn bits_to_code(bits: &str) -> Result<u32> {
    if bits.is_empty() || bits.len() > MAX_BIT_WIDTH as usize {
        return Err(Error::InvalidArg(format!(
            "bit string {bits:?} must have 1..={MAX_BIT_WIDTH} characters"
        )));
    }
    let mut code = 0u32;
    for c in bits.chars() {
        code = (code << 1)
            | match c {
                '0' => 0,
                '1' => 1,
                _ => {
                    return Err(Error::InvalidArg(format!(
                        "bit string {bits:?} contains {c:?}"
                    )))
                }
            };
    }
    Ok(code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn p(bit_width: u32, max_val: f64) -> QuantizerParams {
        QuantizerParams::new(bit_width, max_val).unwrap()
    }

    #[test]
    fn one_bit_is_sign_with_tie_up() {
        let q = p(1, 1.0);
        assert_eq!(quantize(0.7, &q), 1.0);
        assert_eq!(quantize(-0.7, &q), -1.0);
        assert_eq!(quantize(0.0, &q), 1.0);
        assert_eq!(quantize(-0.0, &q), 1.0);
        assert_eq!(quantize(123.0, &q), 1.0);
        assert_eq!(quantize(-123.0, &q), -1.0);
        assert_eq!(quantize_code(0.3, &q), 1);
        assert_eq!(quantize_code(-0.3, &q), 0);
    }

    #[test]
    fn one_bit_scales_with_max_val() {
        let q = p(1, 2.5);
        assert_eq!(quantize(0.1, &q), 2.5);
        assert_eq!(quantize(-0.1, &q), -2.5);
    }

    #[test]
    fn tensor_quantization_keeps_scale_and_width() {
        let q = p(1, 1.61);
        let t = quantize_tensor(&[-0.3, 0.7], &q).unwrap();
        assert_eq!(t.values, vec![-1.61, 1.61]);
        assert_eq!(t.scale, 1.61);
        assert_eq!(t.bit_width, 1);
        // value/scale is a small integer (up to division round-off) for
        // every representable value.
        for q in [p(1, 1.61), p(2, 3.0), p(3, 7.0), p(4, 0.75)] {
            for code in 0..q.num_levels() {
                let ratio = value_of(code, &q).unwrap() / q.scale();
                assert_abs_diff_eq!(ratio, ratio.round(), epsilon = 1e-9);
                assert!(ratio.abs() <= (q.num_levels() - 1) as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn tensor_quantization_rejects_non_finite_inputs() {
        let q = p(2, 3.0);
        assert!(quantize_tensor(&[0.0, f64::NAN], &q).is_err());
        assert!(quantize_tensor(&[f64::INFINITY], &q).is_err());
        assert!(quantize_tensor(&[], &q).is_ok());
    }

    #[test]
    fn three_bit_grid_tops_out_at_max_val() {
        // 3 bits over [0, 7]: unit step, eight levels 0..=7.
        let q = p(3, 7.0);
        assert_eq!(q.step(), 1.0);
        assert_eq!(q.num_levels(), 8);
        assert_eq!(quantize(3.4, &q), 3.0);
        assert_eq!(quantize(3.5, &q), 4.0); // halfway rounds up
        assert_eq!(quantize(-2.0, &q), 0.0);
        assert_eq!(quantize(9.0, &q), 7.0);
        assert_eq!(quantize(6.9, &q), 7.0);
    }

    #[test]
    fn two_bit_step_splits_max_val_in_three() {
        let q = p(2, 3.0);
        assert_eq!(q.step(), 1.0);
        for (x, want) in [(-1.0, 0.0), (0.4, 0.0), (0.5, 1.0), (1.6, 2.0), (2.7, 3.0), (4.0, 3.0)] {
            assert_eq!(quantize(x, &q), want, "x = {x}");
        }
    }

    #[test]
    fn fractional_step_reconstructs_exactly() {
        let q = p(2, 1.0); // step 1/3
        assert_relative_eq!(q.step(), 1.0 / 3.0);
        for code in 0..4 {
            let v = value_of(code, &q).unwrap();
            assert_eq!(code_of(v, &q).unwrap(), code);
            assert_eq!(quantize(v, &q), v); // idempotent on grid points
        }
    }

    #[test]
    fn codes_round_trip_for_all_levels() {
        for q in [p(1, 1.0), p(1, 0.25), p(2, 3.0), p(3, 7.0), p(4, 1.0), (p(8, 11.0))] {
            for code in 0..q.num_levels() {
                let v = value_of(code, &q).unwrap();
                assert_eq!(code_of(v, &q).unwrap(), code, "{q:?} code {code}");
            }
        }
    }

    #[test]
    fn code_of_rejects_off_grid_values() {
        let q = p(2, 3.0);
        assert!(code_of(1.5, &q).is_err());
        assert!(code_of(0.01, &q).is_err());
        // ...but absorbs sub-tolerance noise.
        assert_eq!(code_of(1.0 + 1e-12, &q).unwrap(), 1);
        assert_eq!(code_of(2.0 - 1e-12, &q).unwrap(), 2);
    }

    #[test]
    fn value_of_rejects_out_of_range_codes() {
        assert!(value_of(2, &p(1, 1.0)).is_err());
        assert!(value_of(8, &p(3, 7.0)).is_err());
        assert!(value_of(7, &p(3, 7.0)).is_ok());
    }

    #[test]
    fn ste_gate_is_inclusive_at_the_rails() {
        let q1 = p(1, 1.0);
        assert_eq!(quantize_ste_grad(1.0, &q1, 5.0), 5.0);
        assert_eq!(quantize_ste_grad(-1.0, &q1, 5.0), 5.0);
        assert_eq!(quantize_ste_grad(1.0 + 1e-9, &q1, 5.0), 0.0);
        assert_eq!(quantize_ste_grad(-1.0 - 1e-9, &q1, 5.0), 0.0);

        let q3 = p(3, 7.0);
        assert_eq!(quantize_ste_grad(0.0, &q3, 2.0), 2.0);
        assert_eq!(quantize_ste_grad(7.0, &q3, 2.0), 2.0);
        assert_eq!(quantize_ste_grad(-0.001, &q3, 2.0), 0.0);
        assert_eq!(quantize_ste_grad(7.001, &q3, 2.0), 0.0);
    }

    #[test]
    fn bit_strings_are_msb_first() {
        assert_eq!(code_to_bits(5, 3), "101");
        assert_eq!(code_to_bits(1, 3), "001");
        assert_eq!(code_to_bits(0, 1), "0");
        assert_eq!(code_to_bits(1, 1), "1");
        assert_eq!(code_to_bits(6, 4), "0110");
        assert_eq!(bits_to_code("101").unwrap(), 5);
        assert_eq!(bits_to_code("0110").unwrap(), 6);
        assert!(bits_to_code("01x").is_err());
        assert!(bits_to_code("").is_err());
    }

    #[test]
    fn params_are_validated() {
        assert!(QuantizerParams::new(0, 1.0).is_err());
        assert!(QuantizerParams::new(25, 1.0).is_err());
        assert!(QuantizerParams::new(2, 0.0).is_err());
        assert!(QuantizerParams::new(2, -1.0).is_err());
        assert!(QuantizerParams::new(2, f64::INFINITY).is_err());
        assert!(QuantizerParams::new(24, 1.0).is_ok());
    }

    proptest! {
        #[test]
        fn quantize_lands_on_grid_and_is_idempotent(
            x in -100.0f64..100.0,
            bits in 1u32..=8,
            max_val in 0.01f64..50.0,
        ) {
            let q = p(bits, max_val);
            let v = quantize(x, &q);
            // On-grid: code_of accepts it and reproduces the same value.
            let code = code_of(v, &q).unwrap();
            prop_assert_eq!(value_of(code, &q).unwrap(), v);
            prop_assert_eq!(quantize(v, &q), v);
        }

        #[test]
        fn quantize_is_monotone(
            a in -100.0f64..100.0,
            b in -100.0f64..100.0,
            bits in 1u32..=8,
            max_val in 0.01f64..50.0,
        ) {
            let q = p(bits, max_val);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, &q) <= quantize(hi, &q));
        }

        #[test]
        fn quantize_error_bounded_by_half_step_inside_range(
            t in 0.0f64..=1.0,
            bits in 2u32..=8,
            max_val in 0.01f64..50.0,
        ) {
            let q = p(bits, max_val);
            let x = t * max_val; // inside the active range
            prop_assert!((quantize(x, &q) - x).abs() <= q.step() / 2.0 + 1e-12);
        }
    }
}
