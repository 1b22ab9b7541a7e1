//! Two-scale structured compression for small residual CNNs.
//!
//! The pipeline removes whole residual blocks ranked by a mutual-information
//! score, then slices channels inside the survivors (stage output planes and
//! block mid-channels) under residual-safety constraints, recalibrating batch
//! norms and distilling from the original network after every structural
//! change.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod graph;
pub mod mi;
pub mod pipeline;
pub mod profile;
pub mod prune;
pub mod report;
pub mod slice;
pub mod train;

use std::path::PathBuf;

pub use trimnet_tensor as tensor;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] trimnet_tensor::TensorError),

    /// Structural problem in a network graph (bad reference, illegal edit).
    #[error("{0}")]
    Graph(String),

    /// One or more residual-safety invariants do not hold.
    #[error("structural invariants violated:\n{0}")]
    Invariants(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    /// Malformed on-disk artifact (checkpoint, dataset, score table, ...).
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: msg.into() }
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}
