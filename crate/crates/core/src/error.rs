use std::path::PathBuf;

use thiserror::Error;

use crate::blocks::PathId;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] nt_tensor::TensorError),

    #[error("invalid backbone plan: {0}")]
    InvalidPlan(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("proxy {path} cannot pool {from}x{from} down to {to}x{to}")]
    IncompatibleProxy {
        path: PathId,
        from: usize,
        to: usize,
    },

    #[error("node {0} has no alive incoming path")]
    DeadNode(usize),

    #[error("classifier input node is dead: the graph is over-pruned")]
    OverPruned,

    #[error("removing {n} pre-trained blocks disconnects the classifier")]
    Infeasible { n: usize },

    #[error("pre-trained weights changed during training: {0}")]
    FrozenMutation(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}; config: {config}")]
    Diverged {
        epoch: usize,
        step: usize,
        config: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("idx file {path}: {detail}")]
    Idx { path: PathBuf, detail: String },

    #[error("too many paths ({0}) for exact enumeration; use Monte-Carlo")]
    TooManyPaths(usize),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("missing artifact {path}; run `{command}` first")]
    MissingArtifact {
        path: PathBuf,
        command: &'static str,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
