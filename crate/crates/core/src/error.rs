use std::io;

use thiserror::Error;

/// Errors raised anywhere in the engine, the training mechanisms and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("batch-norm shard {shard} has {size} sample(s); at least 2 are required")]
    DegenerateShard { shard: usize, size: usize },
    #[error("batch-norm state corrupted: {0}")]
    Corruption(String),
    #[error("row {row} has L2 norm {norm:e}, below the floor {floor:e}")]
    DegenerateFeature { row: usize, norm: f64, floor: f64 },
    #[error("target {target} out of range for {classes} classes")]
    Index { target: usize, classes: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("divergence: non-finite values in {0}")]
    Divergence(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit status for the CLI: 2 config, 3 divergence, 4 io/format, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence(_) => 3,
            Error::Io(_) | Error::Format(_) | Error::Consistency(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
