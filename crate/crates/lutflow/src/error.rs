use thiserror::Error;

/// Unified error type for every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A topology description violates a structural rule (widths, fan-in,
    /// skip links, quantizer chaining, conv placement).
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    /// A serialized model violates its own invariants (masked weights that
    /// are nonzero, row support mismatches, off-grid weights, bad version).
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// An operation was called with an argument outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Dataset could not be decoded (bad magic, truncated payload, malformed
    /// rows, label out of range).
    #[error("bad dataset: {0}")]
    Data(String),

    /// Exhaustive enumeration would exceed the configured address-width cap.
    #[error("truth table for {bits} input bits exceeds the {limit}-bit limit")]
    TableLimit { bits: usize, limit: usize },

    /// The requested output cannot be produced for this layer kind.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Two evaluation paths disagreed on at least one input.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// Training could not proceed (diverged loss, impossible schedule).
    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
