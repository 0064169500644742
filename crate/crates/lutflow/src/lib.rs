//! Sparse quantized networks compiled into LUT netlists.
//!
//! The pipeline: describe a topology ([`topology::TopologySpec`]), train it
//! ([`training`]), enumerate every neuron into an exhaustive truth table
//! ([`tablegen`]), lower the tables to a Verilog netlist ([`netlist`]), and
//! predict the hardware cost of any of it analytically ([`costmodel`]) —
//! with bit-exact agreement checks between the float model, the tables, and
//! the simulated netlist at every step.

pub mod cli;
pub mod costmodel;
pub mod layers;
pub mod error;
pub mod data;
pub mod netlist;
pub mod quantizer;
pub mod tablegen;
pub mod topology;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
