use thiserror::Error;

/// Errors raised by the numeric, quantization and optimizer primitives.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("quantization axis mismatch: {0}")]
    AxisMismatch(String),

    #[error("inner dimension {k} exceeds the int32-safe bound {bound}")]
    AccumulatorOverflow { k: usize, bound: usize },

    #[error("invalid fp8 format: {0}")]
    InvalidFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear context does not match variant {0}")]
    ContextMismatch(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
