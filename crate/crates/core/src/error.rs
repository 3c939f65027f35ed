use thiserror::Error;

/// Errors raised by tensor ops, model construction and the probes.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: tensor does not belong to this tape")]
    TapeMismatch { op: &'static str },
    #[error("backward root is not recorded on the tape")]
    RootNotOnTape,
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("relation label {label} out of range for table with {n_relations} rows")]
    LabelOutOfRange { label: usize, n_relations: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("initialization scheme already applied to this stack")]
    AlreadyScaled,
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, CoreError>;
