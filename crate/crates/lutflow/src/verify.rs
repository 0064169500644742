//! Equivalence checking across the three evaluation paths: quantized float
//! forward, truth-table lookup, and gate-level netlist simulation.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::layers::Model;
use crate::netlist::{self, NetlistStyle};
use crate::quantizer::{code_of, code_to_bits, value_of};
use crate::tablegen::{self, ModelTables};

#[derive(Debug)]
pub struct VerifyOutcome {
    pub samples: usize,
}

/// Drive the model's three evaluation paths over random in-alphabet inputs.
/// The first disagreement is reported as a mismatch carrying the exact input
/// bits (most significant first, matching the netlist's input bus order).
pub fn verify_model(model: &Model, samples: usize, seed: u64) -> Result<VerifyOutcome> {
    let tables = tablegen::generate_model_tables(model)?;
    verify_model_with(model, &tables, samples, seed)
}

pub fn verify_model_with(
    model: &Model,
    tables: &ModelTables,
    samples: usize,
    seed: u64,
) -> Result<VerifyOutcome> {
    let nl = netlist::build_netlist(model, tables, NetlistStyle::Combinational)?;
    let spec = &model.spec;
    let in_params = spec.layers[0].in_params();
    let out_layer = spec.layers.last().expect("validated");
    let out_params = out_layer.out_params();
    let levels = in_params.num_levels();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let codes: Vec<u32> =
            (0..spec.input_features).map(|_| rng.gen_range(0..levels)).collect();
        let values: Vec<f64> =
            codes.iter().map(|&c| value_of(c, &in_params)).collect::<Result<_>>()?;

        let acts = model.forward(&values)?;
        let float_codes: Vec<u32> = acts
            .quantized
            .last()
            .expect("at least one layer")
            .values
            .iter()
            .map(|&v| code_of(v, &out_params))
            .collect::<Result<_>>()?;
        let table_codes = tablegen::table_forward(model, tables, &codes)?;
        let sim_bits =
            netlist::simulate(&nl, &netlist::codes_to_bits(&codes, in_params.bit_width))?;
        let sim_codes = netlist::bits_to_codes(&sim_bits, out_params.bit_width)?;

        if float_codes != table_codes || float_codes != sim_codes {
            let bits: String =
                codes.iter().rev().map(|&c| code_to_bits(c, in_params.bit_width)).collect();
            return Err(Error::Mismatch(format!(
                "input bits {bits} (bus M0[{}:0], MSB first): float {float_codes:?}, \
                 tables {table_codes:?}, netlist {sim_codes:?}",
                spec.input_features * spec.input_bit_width as usize - 1,
            )));
        }
    }
    Ok(VerifyOutcome { samples })
}
