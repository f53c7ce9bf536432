use std::path::PathBuf;

use thiserror::Error;

use crate::graph::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed manifest, plan, or mask document.
    #[error("parse error: {0}")]
    Parse(String),

    /// Tensor data does not match its declared dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Graph structure is invalid (cycle, dangling edge, width mismatch, ...).
    #[error("topology error: {0}")]
    Topology(String),

    #[error("layer group rows disagree: node {node} has {found} rows, group expects {expected}")]
    RowMismatch {
        node: NodeId,
        expected: usize,
        found: usize,
    },

    #[error("node {node} has {cols} columns, not {features} features x block {block}")]
    BlockSize {
        node: NodeId,
        cols: usize,
        features: usize,
        block: usize,
    },

    #[error("transform plan does not match the graph: {0}")]
    PlanMismatch(String),

    #[error("invalid permutation: {0}")]
    Permutation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("brute-force search limited to {limit} rows, got {rows}")]
    TooManyRows { rows: usize, limit: usize },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
