use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("scalar field mismatch between operator blocks")]
    FieldMismatch,
    #[error("rank-deficient motion Jacobian in frame {frame} (|R_jj| = {value:e})")]
    RankDeficient { frame: usize, value: f64 },
    #[error("singular triangular factor")]
    Singular,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line search failed after {0} backtracks")]
    LineSearch(usize),
    #[error("search direction is zero")]
    ZeroStep,
    #[error("zero-norm reference in relative error")]
    ZeroNorm,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("malformed file {}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
