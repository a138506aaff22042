//! Crate-wide error type.
//!
//! Every fallible operation returns [`MtaError`]. The CLI maps variants to
//! process exit codes: config problems exit 2, file-format problems exit 3,
//! diverging optimization exits 4.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MtaError>;

#[derive(Debug, Error)]
pub enum MtaError {
    /// Operand shapes are incompatible for the named operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument is outside the mathematical domain of the operation
    /// (log of a non-positive value, division by exact zero, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Autodiff misuse: non-scalar loss, missing gradient, and similar.
    #[error("autodiff error: {0}")]
    Graph(String),

    /// Invalid run configuration (unknown key, bad value, missing section).
    #[error("config error: {0}")]
    Config(String),

    /// A file failed to parse as the format its reader expects.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Training produced a non-finite loss.
    #[error("optimization diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("victim models are not competent enough to attack: {0}")]
    IncompetentVictim(String),

    #[error("invalid call: {0}")]
    InvalidCall(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MtaError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MtaError::Shape { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        MtaError::Domain { op, detail: detail.into() }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        MtaError::Format { path: path.into(), detail: detail.into() }
    }

    /// Exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            MtaError::Config(_) => 2,
            MtaError::Format { .. } => 3,
            MtaError::Divergence { .. } => 4,
            _ => 1,
        }
    }
}
