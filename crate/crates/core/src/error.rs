use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: usize, detail: String },

    #[error("shape mismatch: {0}")]
    Dim(String),

    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },

    #[error("missing {kind} `{name}`")]
    Missing { kind: &'static str, name: String },

    #[error("backward called before forward evaluation")]
    NotEvaluated,

    #[error("output node {0} is not a scalar")]
    NotScalar(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rank {rank} exceeds min dimension {limit} of layer {layer}")]
    RankTooLarge {
        layer: String,
        rank: usize,
        limit: usize,
    },

    #[error("target of length {target} is infeasible for {frames} frames")]
    InfeasibleTarget { target: usize, frames: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("bad archive {path:?}: {detail}")]
    Archive { path: PathBuf, detail: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
