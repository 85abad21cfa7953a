use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParameter(String),
    #[error("backward needs a single-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("loss function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("parameter container: {0}")]
    Container(String),
}
