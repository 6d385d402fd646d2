use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("non-finite loss at epoch {} step {}", .0.epoch, .0.step)]
    NonFiniteLoss(Box<BatchDump>),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Index(_) => "index",
            Error::Length(_) => "length",
            Error::Contract(_) => "contract",
            Error::Data(_) => "data",
            Error::Integrity(_) => "integrity",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// True for errors caused by invalid user input rather than a failure at run time.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Data(_) | Error::Length(_) | Error::Index(_) | Error::Json { .. }
        )
    }
}

/// Snapshot of the batch that produced a non-finite loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchDump {
    pub epoch: usize,
    pub step: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub sample_indices: Vec<usize>,
    pub labels: Vec<usize>,
}
