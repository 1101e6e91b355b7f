use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected width {expected}, got {got}")]
    InputShape { expected: usize, got: usize },

    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid batch size {size} for dataset of {available} samples")]
    BatchSize { size: usize, available: usize },

    #[error("IDX format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("wanda scores need activation statistics from a captured forward pass")]
    MissingActivations,

    #[error("gradient scores need a gradient estimate")]
    MissingGradient,

    #[error("cardinality violation: solution sets {got} bits, block requires {expected}")]
    Cardinality { expected: usize, got: usize },

    #[error("index {0} is fixed and cannot be part of a block")]
    FixedIndex(usize),

    #[error("solution length {got} does not match block size {expected}")]
    SolutionLength { expected: usize, got: usize },

    #[error("infeasible cardinality k={k} for n={n}")]
    InfeasibleCardinality { n: usize, k: usize },

    #[error("brute force refused: n={n} exceeds the limit of {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("config error for `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("problem dump parse error at line {line}: {detail}")]
    Dump { line: usize, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
