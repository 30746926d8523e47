use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(
        "{file}: row {row}{}: {message}",
        column.as_ref().map(|c| format!(", column {c:?}")).unwrap_or_default()
    )]
    Ingest {
        file: String,
        row: usize,
        column: Option<String>,
        message: String,
    },

    #[error("unknown country {name:?}; available: {}", available.join(", "))]
    UnknownCountry { name: String, available: Vec<String> },

    #[error("degenerate feature {feature}: max == min == {value}")]
    DegenerateFeature { feature: usize, value: f64 },

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    #[error("undefined metric: actual value at index {index} is zero")]
    UndefinedMetric { index: usize },

    #[error("insufficient data: need at least {required} points, have {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("training diverged at epoch {epoch}, sample {sample}: loss {loss}")]
    Diverged { epoch: usize, sample: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op: op.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
