use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("binding for `{name}` has shape {got:?}, node expects {expected:?}")]
    BindingShape { name: String, expected: Vec<usize>, got: Vec<usize> },

    #[error("parameter {0} is missing from the store")]
    MissingParameter(usize),

    #[error("gradient requested for non-scalar output of shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("operation `{0}` has no differentiation rule on this path")]
    UnsupportedOp(&'static str),

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("unknown node id {0}")]
    UnknownNode(usize),
}
