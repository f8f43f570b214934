//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants are kept distinct
//! enough that callers (and the command-line tool's exit paths) can tell a
//! malformed file apart from a shape mismatch or a bad configuration value
//! without string matching.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DpnError>;

/// Errors produced by tensor construction, inference, training, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum DpnError {
    /// Two containers that must agree on geometry do not.
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    /// A voxel or label index lies outside its container.
    #[error("index out of bounds in {context}: {detail}")]
    OutOfBounds {
        context: &'static str,
        detail: String,
    },

    /// A value that must be a probability (finite, within [0, 1]) is not.
    #[error("invalid probability in {context}: {value}")]
    InvalidProbability { context: &'static str, value: f32 },

    /// A per-voxel distribution does not sum to 1 within tolerance.
    #[error("distribution not normalized at voxel {voxel}: sum = {sum}")]
    NotNormalized { voxel: String, sum: f32 },

    /// A label index is outside the label space (or an ignore value appears
    /// where a concrete label is required).
    #[error("invalid label in {context}: {detail}")]
    InvalidLabel {
        context: &'static str,
        detail: String,
    },

    /// A configuration field failed validation.
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    /// A file does not start with the magic/header its format requires.
    #[error("bad {format} header in {path}: {detail}")]
    BadHeader {
        format: &'static str,
        path: PathBuf,
        detail: String,
    },

    /// A file ended before its declared payload was complete.
    #[error("truncated {format} payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        format: &'static str,
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    /// Declared dimensions are zero, absurd, or overflow addressable memory.
    #[error("unreasonable dimensions in {format} file {path}: {detail}")]
    BadDimensions {
        format: &'static str,
        path: PathBuf,
        detail: String,
    },

    /// The file is a recognizable but unsupported variant of a format
    /// (for example an ASCII netpbm file where binary is required).
    #[error("unsupported {format} variant in {path}: {detail}")]
    UnsupportedVariant {
        format: &'static str,
        path: PathBuf,
        detail: String,
    },

    /// The training loss became non-finite.
    #[error("non-finite loss at iteration {iteration} of stage `{stage}`")]
    NonFiniteLoss { iteration: usize, stage: String },

    /// An operation that needs at least one element received none.
    #[error("empty input in {context}: {detail}")]
    EmptyInput {
        context: &'static str,
        detail: String,
    },

    /// Underlying filesystem failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Run configuration JSON that does not parse.
    #[error("config parse error in {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl DpnError {
    /// Attach a path to a raw I/O failure.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DpnError::Io {
            path: path.into(),
            source,
        }
    }
}
