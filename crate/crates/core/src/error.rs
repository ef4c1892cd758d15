use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function value is not finite when perturbing coordinate {0}")]
    NonFiniteAt(usize),
    #[error("non-finite value in {term}: {value}")]
    NonFinite { term: String, value: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("degenerate view: {0}")]
    DegenerateView(&'static str),
    #[error("eigen-decomposition did not converge")]
    NoConvergence,
    #[error("empty depth map")]
    EmptyDepth,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
