use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The variants are grouped by who is at fault: shape/domain/state errors are
/// misuse of the numeric API, `Config` is a bad architecture or training
/// config, `Data`/`Io` are problems with input files and `Divergence` is a
/// numerically broken training run.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },
}

/// Errors raised while reading tabular data.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("cannot open {path}: {reason}")]
    Missing { path: String, reason: String },

    #[error("{0} is empty")]
    Empty(String),

    #[error("target column `{0}` not found in header")]
    NoTargetColumn(String),

    #[error("row {row}, column `{column}`: cannot parse {value:?} as a number")]
    NonNumeric { row: usize, column: String, value: String },

    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },

    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },

    #[error("malformed csv: {0}")]
    Malformed(String),

    #[error("{0}")]
    Incompatible(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
