use crate::graph::NodeId;
use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("shape {dims:?} overflows the index type")]
    ShapeOverflow { dims: Vec<usize> },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: NodeId },

    #[error("unknown node id {0}")]
    UnknownNode(NodeId),

    #[error("{op} expects {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },

    #[error("graph is not acyclic: cycle through node {0}")]
    Cycle(NodeId),

    #[error("graph structure: {0}")]
    Structure(String),

    #[error("node {node} ({role}) has no bound value")]
    Unbound { node: NodeId, role: &'static str },

    #[error("no backward rule registered for op `{0}`")]
    UnsupportedOp(String),

    #[error("no accumulator bound for frontier node {0}")]
    MissingAccumulator(NodeId),

    #[error("preconditioner was bound to a different frontier than the graph has now")]
    FrontierChanged,

    #[error("training diverged at iteration {iter}: {detail}")]
    Divergence { iter: usize, detail: String },

    #[error("{path}: format error at byte offset {offset}: {detail}")]
    Format { path: String, offset: u64, detail: String },

    #[error("parse error on line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidShape { op, detail: detail.into() }
    }
}
