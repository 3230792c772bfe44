//! Crate-wide error type. Every fallible public operation returns [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested tensor op.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A tensor op produced NaN or infinity, or a non-finite leaf was registered.
    #[error("non-finite values produced by {op}")]
    Numerics { op: String },

    /// A caller violated an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A distribution parameter or observation is outside the valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The modality graph contains a directed cycle.
    #[error("cycle detected: {0}")]
    Cycle(String),

    /// Two vertices share a name.
    #[error("duplicate vertex: {0}")]
    DuplicateVertex(String),

    /// An edge references a vertex that was never declared.
    #[error("edge references unknown vertex: {0}")]
    DanglingEdge(String),

    /// A name lookup failed.
    #[error("unknown name: {0}")]
    Lookup(String),

    /// A data file could not be parsed.
    #[error("parse error in {path} (line {line}): {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    /// Loaded data disagrees with declared dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint was written by an incompatible format version.
    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    Version { found: u32, supported: u32 },

    /// A checkpoint is structurally damaged.
    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
