//! Command-line entry point tying the flow together:
//! cost → train → tables → emit → verify.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid config/model/data,
//! 3 verification mismatch. All flags are long-form only, for script
//! stability. Every subcommand is deterministic given identical inputs and
//! seed.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::Rng;
use rand::SeedableRng;

use crate::costmodel::{self, LayerCost};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::layers::{save_model, Model};
use crate::netlist::{self, NetlistStyle};
use crate::quantizer::{code_of, code_to_bits, value_of};
use crate::tablegen::{self, ModelTables};
use crate::topology::{LayerKind, TopologySpec};
use crate::verify::verify_model;
use crate::training::{
    self, LossKind, OptimizerKind, OptimizerParams, PruneSchedule, Targets, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "lutflow",
    version,
    about = "Sparse quantized networks compiled to LUT netlists",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Increase log verbosity (repeat for more detail).
    #[arg(long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Predict per-layer and total LUT cost of a topology.
    Cost {
        /// Topology description (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Print the report as JSON instead of aligned text.
        #[arg(long)]
        json: bool,
    },
    /// Train a model and write it with its metrics log.
    Train(TrainArgs),
    /// Write every neuron's truth table, one JSON file per layer.
    Tables {
        /// Trained model (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit a Verilog netlist plus a files.f manifest.
    Emit {
        /// Trained model (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Netlist style.
        #[arg(long, value_enum)]
        style: StyleArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check float forward == truth tables == netlist on random inputs.
    Verify {
        /// Trained model (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Number of random inputs to check.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Input sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the outcome as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Topology description (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory holding the dataset: IDX pairs (train-images-idx3-ubyte /
    /// train-labels-idx1-ubyte, optional t10k-*) or train.csv / test.csv.
    #[arg(long)]
    data_dir: PathBuf,
    /// Output directory for model.json and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Sparsification strategy; iterative starts fully connected.
    #[arg(long, value_enum, default_value_t = StrategyArg::Apriori)]
    strategy: StrategyArg,
    /// Fraction of each neuron's fan-in turned over per momentum prune event.
    #[arg(long, default_value_t = 0.25)]
    prune_rate: f64,
    /// Optimizer steps between prune events.
    #[arg(long, default_value_t = 100)]
    steps_between: usize,
    #[arg(long, value_enum, default_value_t = LossArg::CrossEntropy)]
    loss: LossArg,
    /// Keep batch-norm parameters and running statistics fixed.
    #[arg(long)]
    freeze_batchnorm: bool,
    /// Shuffle seed; defaults to the topology's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Label column name for CSV datasets.
    #[arg(long, default_value = "label")]
    label_column: String,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Apriori,
    Iterative,
    Momentum,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum LossArg {
    /// Softmax cross-entropy on class labels.
    CrossEntropy,
    /// Mean squared error against one-hot targets.
    Squared,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum StyleArg {
    Comb,
    Pipelined,
}

impl From<StyleArg> for NetlistStyle {
    fn from(s: StyleArg) -> NetlistStyle {
        match s {
            StyleArg::Comb => NetlistStyle::Combinational,
            StyleArg::Pipelined => NetlistStyle::Pipelined,
        }
    }
}

/// Parse arguments, run, and map the outcome to the exit code contract.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Mismatch(_) => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Cost { config, json } => cmd_cost(&config, json),
        Command::Train(args) => cmd_train(&args),
        Command::Tables { model, out } => cmd_tables(&model, &out),
        Command::Emit { model, style, out } => cmd_emit(&model, style.into(), &out),
        Command::Verify { model, samples, seed, json } => {
            cmd_verify(&model, samples, seed, json)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::InvalidArg(format!("cannot read {}: {e}", path.display())))
}

/// Prefix parse failures with the file name; serde errors alone don't say
/// which of several inputs was malformed.
fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Json(e) => Error::InvalidArg(format!("cannot parse {}: {e}", path.display())),
        other => other,
    }
}

fn load_topology(path: &Path) -> Result<TopologySpec> {
    let spec: TopologySpec =
        serde_json::from_str(&read_text(path)?).map_err(|e| in_file(path, e.into()))?;
    spec.validate()?;
    Ok(spec)
}

fn read_model(path: &Path) -> Result<Model> {
    read_text(path).and_then(|text| Model::from_json(&text).map_err(|e| in_file(path, e)))
}

// ---------------------------------------------------------------------------
// cost

fn cmd_cost(config: &Path, json: bool) -> Result<()> {
    let spec = load_topology(config)?;
    let report = costmodel::report(&spec)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&cost_report_json(&spec, &report))?);
    } else {
        print!("{}", cost_report_text(&spec, &report));
    }
    Ok(())
}

fn luts_text(cost: &LayerCost) -> String {
    match cost {
        LayerCost::SparseLinear { luts } => luts.to_string(),
        LayerCost::DenseQuantLinear { luts } => format!("{luts:.3}"),
        LayerCost::SparseConv { costs } => format!(
            "{} (depthwise {} + pointwise {})",
            costs.depthwise + costs.pointwise,
            costs.depthwise,
            costs.pointwise
        ),
    }
}

pub(crate) fn cost_report_text(spec: &TopologySpec, report: &costmodel::LutCostReport) -> String {
    let rows: Vec<(String, String, String, String)> = spec
        .layers
        .iter()
        .zip(&report.layers)
        .enumerate()
        .map(|(i, (layer, cost))| {
            (i.to_string(), layer.kind.to_string(), layer.neurons.to_string(), luts_text(cost))
        })
        .collect();
    let width = |f: fn(&(String, String, String, String)) -> usize, floor: usize| {
        rows.iter().map(f).max().unwrap_or(0).max(floor)
    };
    let (w0, w1, w2) = (
        width(|r| r.0.len(), 5),
        width(|r| r.1.len(), 4),
        width(|r| r.2.len(), 7),
    );
    let mut out = format!("{:<w0$}  {:<w1$}  {:>w2$}  luts\n", "layer", "kind", "neurons");
    for (a, b, c, d) in &rows {
        out.push_str(&format!("{a:<w0$}  {b:<w1$}  {c:>w2$}  {d}\n"));
    }
    out.push_str(&format!("total: {}\n", trim_float(report.total)));
    out
}

/// `f64` to text without a spurious trailing `.0` on integral values.
fn trim_float(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{x:.0}")
    } else {
        x.to_string()
    }
}

pub(crate) fn cost_report_json(
    spec: &TopologySpec,
    report: &costmodel::LutCostReport,
) -> serde_json::Value {
    let layers: Vec<serde_json::Value> = spec
        .layers
        .iter()
        .zip(&report.layers)
        .map(|(layer, cost)| {
            let mut obj = serde_json::json!({
                "kind": layer.kind.to_string(),
                "neurons": layer.neurons,
                "luts": cost.total(),
            });
            if let LayerCost::SparseConv { costs } = cost {
                obj["depthwise"] = costs.depthwise.into();
                obj["pointwise"] = costs.pointwise.into();
                obj["dense_equivalent"] = costs.dense.into();
            }
            obj
        })
        .collect();
    serde_json::json!({ "layers": layers, "total": report.total })
}

// ---------------------------------------------------------------------------
// train

fn load_training_data(dir: &Path, label_column: &str) -> Result<(Dataset, Option<Dataset>)> {
    let idx_images = dir.join("train-images-idx3-ubyte");
    if idx_images.exists() {
        let train = data::load_idx(&idx_images, &dir.join("train-labels-idx1-ubyte"))?;
        let test_images = dir.join("t10k-images-idx3-ubyte");
        let test = if test_images.exists() {
            Some(data::load_idx(&test_images, &dir.join("t10k-labels-idx1-ubyte"))?)
        } else {
            None
        };
        return Ok((train, test));
    }
    let csv = dir.join("train.csv");
    if csv.exists() {
        let train = data::load_csv(&csv, label_column)?;
        let test_csv = dir.join("test.csv");
        let test = if test_csv.exists() {
            Some(data::load_csv(&test_csv, label_column)?)
        } else {
            None
        };
        return Ok((train, test));
    }
    Err(Error::Data(format!(
        "no dataset in {}: expected train-images-idx3-ubyte or train.csv",
        dir.display()
    )))
}

/// The fan-in every sparse layer declares, required uniform for schedules
/// that prune toward it.
fn uniform_fan_in(spec: &TopologySpec) -> Result<u32> {
    let mut fan_in: Option<usize> = None;
    for layer in &spec.layers {
        if layer.kind != LayerKind::SparseLinear {
            continue;
        }
        let f = layer.fan_in.ok_or_else(|| {
            Error::InvalidTopology("sparse layers need a declared fan-in".into())
        })?;
        match fan_in {
            None => fan_in = Some(f),
            Some(prev) if prev != f => {
                return Err(Error::InvalidArg(format!(
                    "pruning needs a uniform fan-in target, topology declares both {prev} and {f}"
                )));
            }
            _ => {}
        }
    }
    fan_in
        .map(|f| f as u32)
        .ok_or_else(|| Error::InvalidArg("no sparse layers to prune".into()))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let spec = load_topology(&args.config)?;
    let seed = args.seed.unwrap_or(spec.seed);
    let schedule = match args.strategy {
        StrategyArg::Apriori => PruneSchedule::apriori(),
        StrategyArg::Iterative => {
            PruneSchedule::iterative(uniform_fan_in(&spec)?, args.steps_between)
        }
        StrategyArg::Momentum => PruneSchedule::momentum(
            args.prune_rate,
            uniform_fan_in(&spec)?,
            args.steps_between,
        ),
    };
    let mut model = match args.strategy {
        StrategyArg::Iterative => Model::new_random_dense(&spec, spec.seed)?,
        _ => Model::new_random(&spec, spec.seed)?,
    };
    let (mut train_set, mut test_set) = load_training_data(&args.data_dir, &args.label_column)?;
    train_set.validate()?;
    let in_params = spec.layers[0].in_params();
    let (scale, offset) = data::scale_to_quantizer(&mut train_set, &in_params);
    if let Some(test) = test_set.as_mut() {
        test.validate()?;
        data::apply_affine(test, scale, offset);
    }
    info!(
        "training on {} samples ({} classes), input scale {scale}, offset {offset}",
        train_set.len(),
        train_set.num_classes
    );

    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        optimizer: OptimizerParams {
            kind: match args.optimizer {
                OptimizerArg::Sgd => OptimizerKind::Sgd { momentum: 0.9 },
                OptimizerArg::Adam => {
                    OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
                }
            },
            learning_rate: args.learning_rate,
        },
        schedule,
        loss: match args.loss {
            LossArg::CrossEntropy => LossKind::SoftmaxCrossEntropy,
            LossArg::Squared => LossKind::MeanSquared,
        },
        freeze_batchnorm: args.freeze_batchnorm,
        seed,
        ..TrainConfig::default()
    };
    let onehot: Vec<Vec<f64>>;
    let targets = match args.loss {
        LossArg::CrossEntropy => Targets::Classes(&train_set.labels),
        LossArg::Squared => {
            let classes = spec.layers.last().unwrap().neurons;
            onehot = train_set
                .labels
                .iter()
                .map(|&l| {
                    let mut row = vec![0.0; classes];
                    row[l as usize] = 1.0;
                    row
                })
                .collect();
            Targets::Values(&onehot)
        }
    };
    let report = training::train(&mut model, &train_set.features, &targets, &cfg)?;

    fs::create_dir_all(&args.out)?;
    let model_path = args.out.join("model.json");
    save_model(&model, &model_path)?;
    let metrics_path = args.out.join("metrics.csv");
    fs::write(&metrics_path, training::metrics_to_csv(&report.metrics))?;

    let last = report.metrics.last().expect("at least one epoch");
    print!("trained {} epochs ({} steps", cfg.epochs, report.steps);
    if report.prune_events > 0 {
        print!(", {} prune events", report.prune_events);
    }
    print!("): loss {:.6}", last.loss);
    if let Some(acc) = last.accuracy {
        print!(", accuracy {acc:.4}");
    }
    println!();
    if let Some(test) = &test_set {
        let mut hits = 0usize;
        for (row, &label) in test.features.iter().zip(&test.labels) {
            if model.predict(row)? == label as usize {
                hits += 1;
            }
        }
        println!(
            "test accuracy: {:.4} ({hits}/{})",
            hits as f64 / test.len() as f64,
            test.len()
        );
    }
    println!("wrote {} and {}", model_path.display(), metrics_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// tables

fn cmd_tables(model_path: &Path, out: &Path) -> Result<()> {
    let model = read_model(model_path)?;
    let tables = tablegen::generate_model_tables(&model)?;
    fs::create_dir_all(out)?;
    for (i, entry) in tables.layers.iter().enumerate() {
        let path = out.join(format!("layer{i}.json"));
        fs::write(&path, serde_json::to_string_pretty(&tablegen::tables_entry_to_json(entry))?)?;
        info!("wrote {}", path.display());
    }
    println!("wrote {} table files to {}", tables.layers.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// emit

fn cmd_emit(model_path: &Path, style: NetlistStyle, out: &Path) -> Result<()> {
    let model = read_model(model_path)?;
    let tables = tablegen::generate_model_tables(&model)?;
    let nl = netlist::build_netlist(&model, &tables, style)?;
    let paths = netlist::emit_verilog(&nl, out)?;
    println!("wrote {} files to {}", paths.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// verify

fn cmd_verify(model_path: &Path, samples: usize, seed: u64, json: bool) -> Result<()> {
    let model = read_model(model_path)?;
    let outcome = verify_model(&model, samples, seed)?;
    if json {
        println!(
            "{}",
            serde_json::json!({ "samples": outcome.samples, "equivalent": true })
        );
    } else {
        println!("verified {} samples: float == tables == netlist", outcome.samples);
    }
    Ok(())
}
