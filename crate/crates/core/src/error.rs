use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected} features, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    #[error("exit index {index} out of range for a model with {n_exits} exits")]
    ExitOutOfRange { index: usize, n_exits: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("attack records contain a single membership class")]
    SingleClass,

    #[error("clustering produced {found} clusters (max {max}); increase the number of queries per sample")]
    ClusteringFailed { found: usize, max: usize },

    #[error("delta_t must be positive, got {0}")]
    NonPositiveGap(f64),

    #[error("standard deviation must be non-negative and finite, got {0}")]
    InvalidSigma(f64),

    #[error("csv parse error at line {line}: {message}")]
    CsvParse { line: u64, message: String },

    #[error("missing value at row {row}, column `{column}`")]
    MissingValue { row: u64, column: String },

    #[error("missing artifact {path}: run `{command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error("serialization: {0}")]
    Serde(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        Error::CsvParse { line, message: e.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
