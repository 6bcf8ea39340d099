//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by simulation, estimation, tensor, and model code.
#[derive(Error, Debug)]
pub enum Error {
    /// A parameter or argument failed validation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor operand shapes are incompatible for the requested op.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A linear system could not be solved.
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// A numeric invariant was violated at run time.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A model's parameter count falls outside its allowed budget.
    #[error("parameter budget violated for {family}: {actual} parameters, allowed {lo}..={hi}")]
    ParameterBudget {
        family: String,
        actual: usize,
        lo: usize,
        hi: usize,
    },

    /// A realization file header could not be parsed.
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: String, reason: String },

    /// Payload length disagrees with the cell count declared in the header.
    #[error("dimension mismatch in {path}: header declares {expected} cells, payload holds {actual}")]
    DimensionMismatch {
        path: String,
        expected: usize,
        actual: usize,
    },

    /// A file ended before the declared content was read.
    #[error("truncated file {path}: {reason}")]
    Truncated { path: String, reason: String },

    /// A stored weight archive or checkpoint is internally inconsistent.
    #[error("bad archive {path}: {reason}")]
    BadArchive { path: String, reason: String },

    /// Weight import found a name or shape that the model does not expose.
    #[error("weight mismatch: {0}")]
    WeightMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Convenience constructor for [`Error::InvalidArgument`].
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Convenience constructor for [`Error::Io`] carrying the offending path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Convenience constructor for [`Error::Json`] carrying the offending path.
    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
