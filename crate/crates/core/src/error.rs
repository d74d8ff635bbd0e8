use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("target {target} at row {index} is out of range for {classes} classes")]
    TargetOutOfRange {
        index: usize,
        target: usize,
        classes: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),
    #[error(
        "patch geometry: ({extent} - {patch}) leaves remainder {remainder} for stride {stride}"
    )]
    Geometry {
        extent: usize,
        patch: usize,
        stride: usize,
        remainder: usize,
    },
    #[error("position id {id} out of range for {positions} positions")]
    PositionOutOfRange { id: usize, positions: usize },
    #[error("masking ratio {0} outside [0, 1)")]
    InvalidEta(f64),
    #[error("context set is empty")]
    EmptyContext,
    #[error("invalid context index {index} for {tokens} tokens")]
    InvalidContext { index: usize, tokens: usize },
    #[error("unknown dataset kind {0:?}")]
    UnknownKind(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite gradient for {0:?}; step rejected")]
    NonFiniteGradient(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("k = {k} outside [1, {train}]")]
    KOutOfRange { k: usize, train: usize },
    #[error("checkpoint has no position head")]
    NoPositionHead,
}
