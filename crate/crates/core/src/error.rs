//! Error taxonomy shared by every module.
//!
//! The variants split along the boundary the CLI needs for its exit codes:
//! configuration/input/format problems (exit 2) versus numeric failures such as
//! divergence or undefined metrics (exit 3).

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: impossible field combinations, out-of-range
    /// settings, malformed intervention specs, unknown experiment names.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid runtime input: out-of-range token ids, positions outside a
    /// sequence, missing answer positions.
    #[error("input error: {0}")]
    Input(String),

    /// A word that is not in the closed vocabulary.
    #[error("unknown token `{0}`")]
    UnknownToken(String),

    /// Numeric failure: non-finite loss/logits, eigensolver non-convergence,
    /// zero vectors where a direction is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A metric whose formula is undefined for the given inputs (e.g. a zero
    /// denominator in the indirect effect). Reported and counted by
    /// aggregation rather than silently dropped.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A required aggregate cell has no data (e.g. a mean-store cell that no
    /// sample populated).
    #[error("missing data: {0}")]
    MissingData(String),

    /// Serialization/deserialization problems in manifests, checkpoints,
    /// config files, and reports.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl Error {
    /// `true` for failures of arithmetic rather than of usage; the CLI maps
    /// these to exit code 3 and everything else to exit code 2.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::UndefinedMetric(_))
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
