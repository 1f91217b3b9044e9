use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DstError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DstError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {}: {msg} (at byte offset {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("parse error in {}: row {row}, column {column}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        msg: String,
    },

    #[error("dataset not found: {}: {msg}", path.display())]
    Ingestion { path: PathBuf, msg: String },

    #[error("infeasible density: {0}")]
    InfeasibleDensity(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: u64, msg: String },

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("harness error: {0}")]
    Harness(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DstError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DstError::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DstError::Shape(msg.into())
    }

    pub(crate) fn selection(msg: impl Into<String>) -> Self {
        DstError::Selection(msg.into())
    }
}
