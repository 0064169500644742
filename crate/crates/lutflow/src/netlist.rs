//! Netlist construction, Verilog emission, and bit-level simulation.
//!
//! A trained model whose layers are all sparse linear maps onto a hierarchy
//! of LUT modules: one module per neuron (an exhaustive `case` over its
//! packed input row), one module per layer wiring neuron inputs out of the
//! layer's input bus, and one top module chaining the layers. Bit layout is
//! shared with the table stage: feature `j` of a `b`-bit bus occupies bits
//! `[j·b+b−1 : j·b]`, most significant code bit highest, and neuron `n`
//! writes output bits `[n·ob+ob−1 : n·ob]`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::{LayerParams, Model};
use crate::tablegen::{ModelTables, TablesEntry, TruthTable};
use crate::topology::LayerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetlistStyle {
    /// Pure combinational circuit: no clock, no registers.
    Combinational,
    /// Registered input plus a register after every layer; one result per
    /// clock, valid `layers + 1` edges after its input was presented.
    Pipelined,
}

/// Where one stretch of a layer's input bus comes from. Sources concatenate
/// low-to-high in order: the main path first, then skip sources as declared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusSource {
    ModelInput,
    Layer(usize),
}

/// One neuron: which input bus bits it reads (most significant first), where
/// its output code lands, and the exhaustive table that defines it.
#[derive(Debug, Clone)]
pub struct NetlistNode {
    pub input_bits: Vec<usize>,
    pub out_lo: usize,
    pub out_bits: u32,
    pub table: Arc<TruthTable>,
}

#[derive(Debug, Clone)]
pub struct NetlistLayer {
    pub sources: Vec<BusSource>,
    pub input_bits: usize,
    pub output_bits: usize,
    /// Bits per input feature on this layer's bus.
    pub field_bits: u32,
    pub nodes: Vec<NetlistNode>,
}

#[derive(Debug, Clone)]
pub struct Netlist {
    pub style: NetlistStyle,
    pub input_bits: usize,
    pub output_bits: usize,
    pub layers: Vec<NetlistLayer>,
}

impl Netlist {
    /// Clock edges between presenting an input and reading its result
    /// (pipelined style); combinational circuits settle within the cycle.
    pub fn latency(&self) -> usize {
        match self.style {
            NetlistStyle::Combinational => 0,
            NetlistStyle::Pipelined => self.layers.len() + 1,
        }
    }
}

/// Lower a model plus its truth tables to a netlist. Every layer must be
/// sparse linear — dense and conv layers have no LUT lowering.
pub fn build_netlist(model: &Model, tables: &ModelTables, style: NetlistStyle) -> Result<Netlist> {
    model.validate()?;
    if let Some((i, layer)) = model
        .spec
        .layers
        .iter()
        .enumerate()
        .find(|(_, l)| l.kind != LayerKind::SparseLinear)
    {
        return Err(Error::Unsupported(format!(
            "netlist generation requires sparse_linear layers throughout; layer {i} is {}",
            layer.kind
        )));
    }
    if tables.layers.len() != model.layers.len() {
        return Err(Error::Mismatch(format!(
            "tables cover {} layers, model has {}",
            tables.layers.len(),
            model.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, spec_layer) in model.spec.layers.iter().enumerate() {
        let TablesEntry::Linear(layer_tables) = &tables.layers[i] else {
            return Err(Error::Mismatch(format!("layer {i} tables are not linear")));
        };
        let LayerParams::SparseLinear { mask, .. } = &model.layers[i] else {
            unreachable!("kind checked above")
        };
        if layer_tables.neurons.len() != spec_layer.neurons {
            return Err(Error::Mismatch(format!(
                "layer {i} has {} neurons but {} tables",
                spec_layer.neurons,
                layer_tables.neurons.len()
            )));
        }
        let b = spec_layer.in_bit_width;
        let ob = spec_layer.out_bit_width;
        let mut nodes = Vec::with_capacity(spec_layer.neurons);
        for (n, table) in layer_tables.neurons.iter().enumerate() {
            if table.taps != mask.rows[n] || table.field_bits != b || table.out_bits != ob {
                return Err(Error::Mismatch(format!(
                    "layer {i} neuron {n}: table does not describe the model's mask and widths"
                )));
            }
            let input_bits = table
                .taps
                .iter()
                .flat_map(|&j| {
                    let lo = j * b as usize;
                    (lo..lo + b as usize).rev()
                })
                .collect();
            nodes.push(NetlistNode {
                input_bits,
                out_lo: n * ob as usize,
                out_bits: ob,
                table: Arc::clone(table),
            });
        }
        let mut sources = vec![if i == 0 { BusSource::ModelInput } else { BusSource::Layer(i - 1) }];
        sources.extend(model.spec.skip_sources_into(i).into_iter().map(BusSource::Layer));
        layers.push(NetlistLayer {
            sources,
            input_bits: model.spec.sparse_input_bits(i)?,
            output_bits: spec_layer.neurons * ob as usize,
            field_bits: b,
            nodes,
        });
    }
    Ok(Netlist {
        style,
        input_bits: model.spec.input_features * model.spec.input_bit_width as usize,
        output_bits: layers.last().expect("nonempty").output_bits,
        layers,
    })
}

// ---------------------------------------------------------------------------
// Emission

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerilogFile {
    /// File name, e.g. `LUT_L0_N0.v`.
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerilogOutput {
    /// Modules in dependency order: neurons, then layers, then the top.
    pub files: Vec<VerilogFile>,
    /// `files.f` contents: one file name per line, dependency order.
    pub manifest: String,
}

fn bus(width: usize) -> String {
    format!("[{}:0]", width - 1)
}

fn render_neuron(layer: usize, n: usize, node: &NetlistNode) -> VerilogFile {
    let name = format!("LUT_L{layer}_N{n}");
    let k = node.table.address_bits();
    let mut s = String::new();
    s.push_str(&format!(
        "module {name} ( input {} M0, output {} M1 );\n",
        bus(k as usize),
        bus(node.out_bits as usize)
    ));
    s.push_str(&format!("        reg {} M1;\n", bus(node.out_bits as usize)));
    s.push_str("        always @ (M0) begin\n");
    s.push_str("                case (M0)\n");
    for row in 0..node.table.len() {
        let code = node.table.lookup(row);
        s.push_str(&format!(
            "                        {k}'d{row}: M1 = {}'b{};\n",
            node.out_bits,
            crate::quantizer::code_to_bits(code, node.out_bits)
        ));
    }
    s.push_str("                endcase\n");
    s.push_str("        end\n");
    s.push_str("endmodule\n");
    VerilogFile { name: format!("{name}.v"), contents: s }
}

fn render_layer(i: usize, layer: &NetlistLayer) -> VerilogFile {
    let name = format!("LUTLayer{i}");
    let b = layer.field_bits as usize;
    let mut s = String::new();
    s.push_str(&format!(
        "module {name} (input {} M0, output {} M1\n);\n",
        bus(layer.input_bits),
        bus(layer.output_bits)
    ));
    for (n, node) in layer.nodes.iter().enumerate() {
        let taps: Vec<String> = node
            .table
            .taps
            .iter()
            .map(|&j| {
                if b == 1 {
                    format!("M0[{j}]")
                } else {
                    format!("M0[{}:{}]", j * b + b - 1, j * b)
                }
            })
            .collect();
        s.push_str(&format!(
            "wire {} inpWire{i}_{n} = {{{}}};\n",
            bus(node.table.address_bits() as usize),
            taps.join(", ")
        ));
        s.push_str(&format!(
            "LUT_L{i}_N{n} LUT_L{i}_N{n}_inst (.M0(inpWire{i}_{n}), .M1(M1[{}:{}]));\n\n",
            node.out_lo + node.out_bits as usize - 1,
            node.out_lo
        ));
    }
    s.push_str("endmodule\n");
    VerilogFile { name: format!("{name}.v"), contents: s }
}

/// Signal carrying a source's value at the point layer `d` consumes it.
fn source_signal(nl: &Netlist, d: usize, src: BusSource) -> String {
    match (nl.style, src) {
        (NetlistStyle::Combinational, BusSource::ModelInput) => "M0".into(),
        (NetlistStyle::Combinational, BusSource::Layer(s)) => format!("act{s}"),
        // Pipelined: the main path into layer d is register d; a skip from
        // layer s leaves register s+1 and crosses d−s−1 alignment registers.
        (NetlistStyle::Pipelined, BusSource::ModelInput) => format!("r{d}"),
        (NetlistStyle::Pipelined, BusSource::Layer(s)) => {
            if s + 1 == d {
                format!("r{d}")
            } else {
                let delay = d - s - 1;
                format!("s{s}_{d}_{delay}")
            }
        }
    }
}

fn render_top(nl: &Netlist) -> VerilogFile {
    let last = nl.layers.len() - 1;
    let mut s = String::new();
    let clk = match nl.style {
        NetlistStyle::Combinational => "",
        NetlistStyle::Pipelined => "input clk, ",
    };
    s.push_str(&format!(
        "module LogicNetModule ({clk}input {} M0, output{} M1);\n",
        bus(nl.input_bits),
        bus(nl.output_bits)
    ));
    if nl.style == NetlistStyle::Pipelined {
        s.push_str(&format!("        reg {} r0;\n", bus(nl.input_bits)));
        for (i, layer) in nl.layers.iter().enumerate() {
            s.push_str(&format!("        reg {} r{};\n", bus(layer.output_bits), i + 1));
        }
        for (d, layer) in nl.layers.iter().enumerate() {
            for &src in &layer.sources[1..] {
                let BusSource::Layer(src_layer) = src else { unreachable!() };
                for t in 1..d - src_layer {
                    s.push_str(&format!(
                        "        reg {} s{src_layer}_{d}_{t};\n",
                        bus(nl.layers[src_layer].output_bits)
                    ));
                }
            }
        }
    }
    for (i, layer) in nl.layers.iter().enumerate() {
        let act = if nl.style == NetlistStyle::Pipelined || i < last {
            format!("act{i}")
        } else {
            continue;
        };
        s.push_str(&format!("        wire {} {act};\n", bus(layer.output_bits)));
    }
    for (d, layer) in nl.layers.iter().enumerate() {
        if layer.sources.len() > 1 {
            let concat: Vec<String> =
                layer.sources.iter().rev().map(|&src| source_signal(nl, d, src)).collect();
            s.push_str(&format!(
                "        wire {} cat{d} = {{{}}};\n",
                bus(layer.input_bits),
                concat.join(", ")
            ));
        }
    }
    if nl.style == NetlistStyle::Pipelined {
        s.push_str("        always @(posedge clk) begin\n");
        s.push_str("                r0 <= M0;\n");
        for i in 0..nl.layers.len() {
            s.push_str(&format!("                r{} <= act{i};\n", i + 1));
        }
        for (d, layer) in nl.layers.iter().enumerate() {
            for &src in &layer.sources[1..] {
                let BusSource::Layer(src_layer) = src else { unreachable!() };
                for t in 1..d - src_layer {
                    let prev = if t == 1 {
                        format!("r{}", src_layer + 1)
                    } else {
                        format!("s{src_layer}_{d}_{}", t - 1)
                    };
                    s.push_str(&format!("                s{src_layer}_{d}_{t} <= {prev};\n"));
                }
            }
        }
        s.push_str("        end\n");
    }
    for (i, layer) in nl.layers.iter().enumerate() {
        let input = if layer.sources.len() > 1 {
            format!("cat{i}")
        } else {
            source_signal(nl, i, layer.sources[0])
        };
        let output = if nl.style == NetlistStyle::Pipelined || i < last {
            format!("act{i}")
        } else {
            "M1".into()
        };
        s.push_str(&format!(
            "        LUTLayer{i}  LUTLayer{i}_inst (.M0({input}), .M1({output}));\n"
        ));
    }
    if nl.style == NetlistStyle::Pipelined {
        s.push_str(&format!("        assign M1 = r{};\n", nl.layers.len()));
    }
    s.push_str("endmodule\n");
    VerilogFile { name: "LogicNetModule.v".into(), contents: s }
}

/// Render every module plus the `files.f` manifest, in dependency order.
pub fn render_verilog(nl: &Netlist) -> VerilogOutput {
    let mut files = Vec::new();
    for (i, layer) in nl.layers.iter().enumerate() {
        for (n, node) in layer.nodes.iter().enumerate() {
            files.push(render_neuron(i, n, node));
        }
    }
    for (i, layer) in nl.layers.iter().enumerate() {
        files.push(render_layer(i, layer));
    }
    files.push(render_top(nl));
    let manifest = files.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join("\n") + "\n";
    VerilogOutput { files, manifest }
}

/// Write one `.v` file per module plus `files.f` into `dir`. Returns the
/// written paths, manifest last.
pub fn emit_verilog(nl: &Netlist, dir: &Path) -> Result<Vec<PathBuf>> {
    let out = render_verilog(nl);
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(out.files.len() + 1);
    for f in &out.files {
        let p = dir.join(&f.name);
        std::fs::write(&p, &f.contents)?;
        paths.push(p);
    }
    let manifest = dir.join("files.f");
    std::fs::write(&manifest, &out.manifest)?;
    paths.push(manifest);
    Ok(paths)
}

/// Split Verilog source into structural tokens, ignoring all whitespace.
/// Identifiers, numbers, and based literals (`3'd5`) are single tokens;
/// every other non-space character stands alone.
pub fn verilog_tokens(src: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in src.chars() {
        if ch.is_alphanumeric() || ch == '_' || ch == '$' || ch == '\'' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

// ---------------------------------------------------------------------------
// Simulation

/// Expand per-feature codes into a bus bit vector (`b` bits per feature,
/// feature code's MSB at the slice's high bit).
pub fn codes_to_bits(codes: &[u32], b: u32) -> Vec<bool> {
    let mut bits = Vec::with_capacity(codes.len() * b as usize);
    for &c in codes {
        for i in 0..b {
            bits.push((c >> i) & 1 == 1);
        }
    }
    bits
}

/// Inverse of [`codes_to_bits`].
pub fn bits_to_codes(bits: &[bool], b: u32) -> Result<Vec<u32>> {
    if bits.len() % b as usize != 0 {
        return Err(Error::InvalidArg(format!(
            "bus of {} bits does not split into {b}-bit features",
            bits.len()
        )));
    }
    Ok(bits
        .chunks(b as usize)
        .map(|chunk| chunk.iter().enumerate().map(|(i, &v)| (v as u32) << i).sum())
        .collect())
}

fn eval_layer(layer: &NetlistLayer, input: &[bool]) -> Vec<bool> {
    debug_assert_eq!(input.len(), layer.input_bits);
    let mut out = vec![false; layer.output_bits];
    for node in &layer.nodes {
        let mut row = 0usize;
        for &idx in &node.input_bits {
            row = (row << 1) | input[idx] as usize;
        }
        let code = node.table.lookup(row);
        for i in 0..node.out_bits {
            out[node.out_lo + i as usize] = (code >> i) & 1 == 1;
        }
    }
    out
}

fn concat_bus(layer: &NetlistLayer, input: &[bool], acts: &[Vec<bool>]) -> Vec<bool> {
    let mut bus = Vec::with_capacity(layer.input_bits);
    for &src in &layer.sources {
        match src {
            BusSource::ModelInput => bus.extend_from_slice(input),
            BusSource::Layer(s) => bus.extend_from_slice(&acts[s]),
        }
    }
    bus
}

fn check_input(nl: &Netlist, input: &[bool]) -> Result<()> {
    if input.len() != nl.input_bits {
        return Err(Error::InvalidArg(format!(
            "netlist takes {} input bits, got {}",
            nl.input_bits,
            input.len()
        )));
    }
    Ok(())
}

fn comb_outputs(nl: &Netlist, input: &[bool]) -> Vec<Vec<bool>> {
    let mut acts: Vec<Vec<bool>> = Vec::with_capacity(nl.layers.len());
    for layer in &nl.layers {
        let bus = concat_bus(layer, input, &acts);
        acts.push(eval_layer(layer, &bus));
    }
    acts
}

/// Pipeline registers: the input register, one register per layer, and the
/// skip alignment chains, all starting from zero (there is no reset).
struct PipeState {
    regs: Vec<Vec<bool>>,
    /// `(source layer, destination layer, chain)` in declaration order.
    chains: Vec<(usize, usize, Vec<Vec<bool>>)>,
}

impl PipeState {
    fn new(nl: &Netlist) -> Self {
        let mut regs = vec![vec![false; nl.input_bits]];
        regs.extend(nl.layers.iter().map(|l| vec![false; l.output_bits]));
        let mut chains = Vec::new();
        for (d, layer) in nl.layers.iter().enumerate() {
            for &src in &layer.sources[1..] {
                let BusSource::Layer(s) = src else { unreachable!() };
                let chain = vec![vec![false; nl.layers[s].output_bits]; d - s - 1];
                chains.push((s, d, chain));
            }
        }
        PipeState { regs, chains }
    }

    fn aligned_skip(&self, s: usize, d: usize) -> &[bool] {
        if s + 1 == d {
            &self.regs[d]
        } else {
            let (_, _, chain) =
                self.chains.iter().find(|&&(cs, cd, _)| cs == s && cd == d).expect("chain exists");
            chain.last().expect("nonempty chain")
        }
    }

    /// One clock edge: combinational logic reads the old registers, then
    /// every register loads simultaneously.
    fn step(&mut self, nl: &Netlist, input: &[bool]) {
        let mut acts: Vec<Vec<bool>> = Vec::with_capacity(nl.layers.len());
        for (d, layer) in nl.layers.iter().enumerate() {
            let mut bus = Vec::with_capacity(layer.input_bits);
            bus.extend_from_slice(&self.regs[d]);
            for &src in &layer.sources[1..] {
                let BusSource::Layer(s) = src else { unreachable!() };
                bus.extend_from_slice(self.aligned_skip(s, d));
            }
            acts.push(eval_layer(layer, &bus));
        }
        let mut next_chains = self.chains.clone();
        for (i, (s, _, chain)) in self.chains.iter().enumerate() {
            for t in (0..chain.len()).rev() {
                next_chains[i].2[t] =
                    if t == 0 { self.regs[s + 1].clone() } else { chain[t - 1].clone() };
            }
        }
        self.chains = next_chains;
        for i in (1..self.regs.len()).rev() {
            self.regs[i] = std::mem::take(&mut acts[i - 1]);
        }
        self.regs[0] = input.to_vec();
    }
}

/// Evaluate the netlist on one input. Combinational circuits settle
/// immediately; pipelined ones are clocked from zeroed registers with the
/// input held until the result reaches the output register.
pub fn simulate(nl: &Netlist, input: &[bool]) -> Result<Vec<bool>> {
    check_input(nl, input)?;
    match nl.style {
        NetlistStyle::Combinational => {
            Ok(comb_outputs(nl, input).pop().expect("nonempty netlist"))
        }
        NetlistStyle::Pipelined => {
            let mut state = PipeState::new(nl);
            for _ in 0..nl.latency() {
                state.step(nl, input);
            }
            Ok(state.regs.last().expect("nonempty").clone())
        }
    }
}

/// Clock a pipelined netlist for `cycles` edges with the input held,
/// returning the output register after each edge.
pub fn simulate_cycles(nl: &Netlist, input: &[bool], cycles: usize) -> Result<Vec<Vec<bool>>> {
    if nl.style != NetlistStyle::Pipelined {
        return Err(Error::InvalidArg(
            "cycle-accurate simulation applies to pipelined netlists".into(),
        ));
    }
    check_input(nl, input)?;
    let mut state = PipeState::new(nl);
    let mut trace = Vec::with_capacity(cycles);
    for _ in 0..cycles {
        state.step(nl, input);
        trace.push(state.regs.last().expect("nonempty").clone());
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNorm, LayerParams};
    use crate::quantizer::{code_of, value_of};
    use crate::tablegen::{generate_model_tables, table_forward, testutil::golden_model};
    use crate::topology::{testutil::linear_layer, ConnectivityMask, TopologySpec};
    use rand::{Rng, SeedableRng};

    const GOLDEN_TOP: &str = "\
module LogicNetModule (input [4:0] M0, output[2:0] M1);
        LUTLayer0  LUTLayer0_inst (.M0(M0), .M1(M1));
endmodule
";

    const GOLDEN_LAYER: &str = "\
module LUTLayer0 (input [4:0] M0, output [2:0] M1
);
wire [2:0] inpWire0_0 = {M0[0], M0[2], M0[4]};
LUT_L0_N0 LUT_L0_N0_inst (.M0(inpWire0_0), .M1(M1[0:0]));

wire [2:0] inpWire0_1 = {M0[1], M0[2], M0[3]};
LUT_L0_N1 LUT_L0_N1_inst (.M0(inpWire0_1), .M1(M1[1:1]));

wire [2:0] inpWire0_2 = {M0[0], M0[1], M0[2]};
LUT_L0_N2 LUT_L0_N2_inst (.M0(inpWire0_2), .M1(M1[2:2]));

endmodule
";

    const GOLDEN_NEURON_0: &str = "\
module LUT_L0_N0 ( input [2:0] M0, output [0:0] M1 );
        reg [0:0] M1;
        always @ (M0) begin
                case (M0)
                        3'd0: M1 = 1'b1;
                        3'd1: M1 = 1'b1;
                        3'd2: M1 = 1'b1;
                        3'd3: M1 = 1'b0;
                        3'd4: M1 = 1'b1;
                        3'd5: M1 = 1'b0;
                        3'd6: M1 = 1'b0;
                        3'd7: M1 = 1'b0;
                endcase
        end
endmodule
";

    const GOLDEN_NEURON_1: &str = "\
module LUT_L0_N1 ( input [2:0] M0, output [0:0] M1 );
        reg [0:0] M1;
        always @ (M0) begin
                case (M0)
                        3'd0: M1 = 1'b1;
                        3'd1: M1 = 1'b0;
                        3'd2: M1 = 1'b1;
                        3'd3: M1 = 1'b0;
                        3'd4: M1 = 1'b1;
                        3'd5: M1 = 1'b0;
                        3'd6: M1 = 1'b1;
                        3'd7: M1 = 1'b0;
                endcase
        end
endmodule
";

    fn golden_netlist(style: NetlistStyle) -> Netlist {
        let model = golden_model();
        let tables = generate_model_tables(&model).unwrap();
        build_netlist(&model, &tables, style).unwrap()
    }

    #[test]
    fn golden_netlist_structure() {
        let nl = golden_netlist(NetlistStyle::Combinational);
        assert_eq!(nl.input_bits, 5);
        assert_eq!(nl.output_bits, 3);
        assert_eq!(nl.layers.len(), 1);
        let l = &nl.layers[0];
        assert_eq!(l.sources, vec![BusSource::ModelInput]);
        assert_eq!(l.nodes[0].input_bits, vec![0, 2, 4]);
        assert_eq!(l.nodes[1].input_bits, vec![1, 2, 3]);
        assert_eq!(l.nodes[2].input_bits, vec![0, 1, 2]);
        assert_eq!(l.nodes[1].out_lo, 1);
        assert_eq!(nl.latency(), 0);
    }

    #[test]
    fn golden_emission_matches_the_published_modules() {
        let out = render_verilog(&golden_netlist(NetlistStyle::Combinational));
        let by_name = |n: &str| &out.files.iter().find(|f| f.name == n).unwrap().contents;
        // Token-for-token against the published listings…
        assert_eq!(
            verilog_tokens(by_name("LogicNetModule.v")),
            verilog_tokens(GOLDEN_TOP)
        );
        assert_eq!(verilog_tokens(by_name("LUTLayer0.v")), verilog_tokens(GOLDEN_LAYER));
        assert_eq!(verilog_tokens(by_name("LUT_L0_N0.v")), verilog_tokens(GOLDEN_NEURON_0));
        assert_eq!(verilog_tokens(by_name("LUT_L0_N1.v")), verilog_tokens(GOLDEN_NEURON_1));
        // Neuron 2's published module is neuron 1's with the name swapped.
        let golden_neuron_2 = GOLDEN_NEURON_1.replace("LUT_L0_N1", "LUT_L0_N2");
        assert_eq!(verilog_tokens(by_name("LUT_L0_N2.v")), verilog_tokens(&golden_neuron_2));
        // …and byte-for-byte, pinning the emitted layout.
        assert_eq!(by_name("LogicNetModule.v"), GOLDEN_TOP);
        assert_eq!(by_name("LUTLayer0.v"), GOLDEN_LAYER);
        assert_eq!(by_name("LUT_L0_N0.v"), GOLDEN_NEURON_0);
        assert_eq!(by_name("LUT_L0_N1.v"), GOLDEN_NEURON_1);
    }

    #[test]
    fn emission_is_deterministic() {
        let a = render_verilog(&golden_netlist(NetlistStyle::Combinational));
        let b = render_verilog(&golden_netlist(NetlistStyle::Combinational));
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_lists_all_modules_in_dependency_order() {
        let out = render_verilog(&golden_netlist(NetlistStyle::Combinational));
        let names: Vec<&str> = out.manifest.lines().collect();
        assert_eq!(
            names,
            vec!["LUT_L0_N0.v", "LUT_L0_N1.v", "LUT_L0_N2.v", "LUTLayer0.v", "LogicNetModule.v"]
        );
        assert_eq!(names.len(), out.files.len());
    }

    #[test]
    fn emit_writes_every_module_and_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let nl = golden_netlist(NetlistStyle::Combinational);
        let paths = emit_verilog(&nl, dir.path()).unwrap();
        assert_eq!(paths.len(), 6);
        assert_eq!(paths.last().unwrap().file_name().unwrap(), "files.f");
        let manifest = std::fs::read_to_string(dir.path().join("files.f")).unwrap();
        for name in manifest.lines() {
            assert!(dir.path().join(name).is_file(), "{name} missing");
        }
        assert_eq!(
            std::fs::read_to_string(dir.path().join("LUT_L0_N0.v")).unwrap(),
            GOLDEN_NEURON_0
        );
    }

    #[test]
    fn simulate_golden_all_zero_input() {
        let nl = golden_netlist(NetlistStyle::Combinational);
        let out = simulate(&nl, &[false; 5]).unwrap();
        assert_eq!(out, vec![true, true, true]);
    }

    #[test]
    fn combinational_simulation_matches_table_forward() {
        let mut spec = TopologySpec {
            input_features: 8,
            input_bit_width: 2,
            seed: 0,
            input_shape: None,
            layers: vec![linear_layer(6, 3, 2), linear_layer(5, 2, 2), linear_layer(4, 3, 2)],
            skip_links: vec![(0, 2)],
            table_gen_limit: 24,
        };
        for l in &mut spec.layers {
            l.max_val_in = 3.0;
            l.max_val_out = 3.0;
        }
        let model = crate::layers::Model::new_random(&spec, 77).unwrap();
        let tables = generate_model_tables(&model).unwrap();
        let nl = build_netlist(&model, &tables, NetlistStyle::Combinational).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let codes: Vec<u32> = (0..8).map(|_| rng.gen_range(0..4)).collect();
            let want = table_forward(&model, &tables, &codes).unwrap();
            let got =
                bits_to_codes(&simulate(&nl, &codes_to_bits(&codes, 2)).unwrap(), 2).unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn multibit_wire_selection_uses_ranges() {
        let mut spec = TopologySpec {
            input_features: 4,
            input_bit_width: 2,
            seed: 0,
            input_shape: None,
            layers: vec![linear_layer(2, 2, 2)],
            skip_links: vec![],
            table_gen_limit: 24,
        };
        spec.layers[0].max_val_in = 3.0;
        spec.layers[0].max_val_out = 3.0;
        let model = crate::layers::Model::new_random(&spec, 1).unwrap();
        let tables = generate_model_tables(&model).unwrap();
        let nl = build_netlist(&model, &tables, NetlistStyle::Combinational).unwrap();
        let out = render_verilog(&nl);
        let layer = &out.files.iter().find(|f| f.name == "LUTLayer0.v").unwrap().contents;
        let LayerParams::SparseLinear { mask, .. } = &model.layers[0] else { panic!() };
        let j = mask.rows[0][0];
        assert!(
            layer.contains(&format!("M0[{}:{}]", 2 * j + 1, 2 * j)),
            "expected 2-bit range select in:\n{layer}"
        );
        assert!(layer.contains("wire [3:0] inpWire0_0"));
    }

    #[test]
    fn pipelined_three_layer_model_has_four_register_stages() {
        let mut spec = TopologySpec {
            input_features: 6,
            input_bit_width: 1,
            seed: 0,
            input_shape: None,
            layers: vec![linear_layer(5, 2, 1), linear_layer(4, 2, 1), linear_layer(3, 2, 1)],
            skip_links: vec![],
            table_gen_limit: 24,
        };
        for l in &mut spec.layers {
            l.max_val_in = 1.0;
            l.max_val_out = 1.0;
        }
        let model = crate::layers::Model::new_random(&spec, 5).unwrap();
        let tables = generate_model_tables(&model).unwrap();
        let nl = build_netlist(&model, &tables, NetlistStyle::Pipelined).unwrap();
        assert_eq!(nl.latency(), 4);
        let top = render_top(&nl).contents;
        for r in ["reg [5:0] r0;", "reg [4:0] r1;", "reg [3:0] r2;", "reg [2:0] r3;"] {
            assert!(top.contains(r), "missing {r} in:\n{top}");
        }
        assert!(top.contains("input clk,"));
        assert!(top.contains("always @(posedge clk) begin"));
        assert!(top.contains("assign M1 = r3;"));
        // Layer modules stay purely combinational.
        let out = render_verilog(&nl);
        for f in &out.files {
            if f.name != "LogicNetModule.v" {
                assert!(!f.contents.contains("clk"), "{} mentions clk", f.name);
            }
        }
    }

    #[test]
    fn pipelined_output_settles_at_latency_and_matches_combinational() {
        let mut spec = TopologySpec {
            input_features: 8,
            input_bit_width: 2,
            seed: 0,
            input_shape: None,
            layers: vec![linear_layer(6, 3, 2), linear_layer(5, 2, 2), linear_layer(4, 3, 2)],
            skip_links: vec![(0, 2)],
            table_gen_limit: 24,
        };
        for l in &mut spec.layers {
            l.max_val_in = 3.0;
            l.max_val_out = 3.0;
        }
        let model = crate::layers::Model::new_random(&spec, 41).unwrap();
        let tables = generate_model_tables(&model).unwrap();
        let comb = build_netlist(&model, &tables, NetlistStyle::Combinational).unwrap();
        let pipe = build_netlist(&model, &tables, NetlistStyle::Pipelined).unwrap();
        assert_eq!(pipe.latency(), 4);
        // The 0→2 skip needs one alignment register.
        let top = render_top(&pipe).contents;
        assert!(top.contains("reg [11:0] s0_2_1;"), "missing skip register in:\n{top}");
        assert!(top.contains("s0_2_1 <= r1;"));
        assert!(top.contains("wire [21:0] cat2 = {s0_2_1, r2};"));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let codes: Vec<u32> = (0..8).map(|_| rng.gen_range(0..4)).collect();
            let bits = codes_to_bits(&codes, 2);
            let want = simulate(&comb, &bits).unwrap();
            let trace = simulate_cycles(&pipe, &bits, 8).unwrap();
            assert_eq!(trace[pipe.latency() - 1], want);
            for t in pipe.latency()..8 {
                assert_eq!(trace[t], want, "held input must keep the output steady");
            }
            assert_eq!(simulate(&pipe, &bits).unwrap(), want);
        }
    }

    #[test]
    fn non_sparse_layers_are_rejected_by_name() {
        let mut spec = TopologySpec {
            input_features: 4,
            input_bit_width: 1,
            seed: 0,
            input_shape: None,
            layers: vec![linear_layer(3, 2, 1), linear_layer(2, 2, 1)],
            skip_links: vec![],
            table_gen_limit: 24,
        };
        spec.layers[1].kind = LayerKind::DenseQuantLinear;
        spec.layers[1].fan_in = None;
        spec.layers[1].weight_bit_width = Some(2);
        spec.layers[1].max_val_weight = Some(1.0);
        let model = crate::layers::Model::new_random(&spec, 0).unwrap();
        let tables = generate_model_tables(&model).unwrap();
        let err = build_netlist(&model, &tables, NetlistStyle::Combinational).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Unsupported(_)));
        assert!(msg.contains("layer 1") && msg.contains("dense_quant_linear"), "{msg}");
    }

    #[test]
    fn stale_tables_are_rejected() {
        let model = golden_model();
        let tables = generate_model_tables(&model).unwrap();
        // Same spec, different mask → the tables no longer describe the model.
        let mut other = golden_model();
        let LayerParams::SparseLinear { mask, weights, .. } = &mut other.layers[0] else {
            panic!()
        };
        mask.rows[0] = vec![1, 2, 4];
        weights[0] = vec![0.0, -1.0, -1.0, 0.0, -1.0];
        let err = build_netlist(&other, &tables, NetlistStyle::Combinational).unwrap_err();
        assert!(matches!(err, Error::Mismatch(_)), "{err}");
        // Wrong layer count.
        let short = ModelTables { layers: vec![] };
        assert!(build_netlist(&model, &short, NetlistStyle::Combinational).is_err());
    }

    #[test]
    fn simulate_validates_input_width() {
        let nl = golden_netlist(NetlistStyle::Combinational);
        assert!(matches!(simulate(&nl, &[false; 4]), Err(Error::InvalidArg(_))));
        assert!(matches!(
            simulate_cycles(&nl, &[false; 5], 3),
            Err(Error::InvalidArg(_))
        ));
    }

    #[test]
    fn code_bus_round_trip() {
        let codes = vec![3, 0, 2, 1];
        let bits = codes_to_bits(&codes, 2);
        assert_eq!(bits.len(), 8);
        // Feature 0 code 3 = bits (lo, hi) = (1, 1); feature 2 code 2 = (0, 1).
        assert_eq!(&bits[0..2], &[true, true]);
        assert_eq!(&bits[4..6], &[false, true]);
        assert_eq!(bits_to_codes(&bits, 2).unwrap(), codes);
        assert!(bits_to_codes(&bits[..7], 2).is_err());
    }

    #[test]
    fn identity_neuron_simulates_to_its_input() {
        let spec = TopologySpec {
            input_features: 1,
            input_bit_width: 1,
            seed: 0,
            input_shape: None,
            layers: vec![linear_layer(1, 1, 1)],
            skip_links: vec![],
            table_gen_limit: 24,
        };
        let model = crate::layers::Model {
            spec,
            layers: vec![LayerParams::SparseLinear {
                weights: vec![vec![1.0]],
                mask: ConnectivityMask { rows: vec![vec![0]] },
                bn: BatchNorm::identity(1),
            }],
        };
        let tables = generate_model_tables(&model).unwrap();
        let nl = build_netlist(&model, &tables, NetlistStyle::Combinational).unwrap();
        assert_eq!(simulate(&nl, &[true]).unwrap(), vec![true]);
        assert_eq!(simulate(&nl, &[false]).unwrap(), vec![false]);
    }

    #[test]
    fn float_table_netlist_triple_equivalence_exhaustive() {
        // ≤ 12 input bits → walk the whole input space.
        let model = golden_model();
        let tables = generate_model_tables(&model).unwrap();
        let nl = build_netlist(&model, &tables, NetlistStyle::Combinational).unwrap();
        let in_p = model.spec.layers[0].in_params();
        let out_p = model.spec.layers[0].out_params();
        for bits in 0..32u32 {
            let codes: Vec<u32> = (0..5).map(|j| (bits >> j) & 1).collect();
            let x: Vec<f64> = codes.iter().map(|&c| value_of(c, &in_p).unwrap()).collect();
            let float: Vec<u32> = model.forward(&x).unwrap().quantized[0]
                .values
                .iter()
                .map(|&v| code_of(v, &out_p).unwrap())
                .collect();
            let table = table_forward(&model, &tables, &codes).unwrap();
            let sim =
                bits_to_codes(&simulate(&nl, &codes_to_bits(&codes, 1)).unwrap(), 1).unwrap();
            assert_eq!(float, table);
            assert_eq!(table, sim);
        }
    }
}
