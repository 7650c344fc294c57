use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch ({}x{} vs {}x{})", left.0, left.1, right.0, right.1)]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("data length mismatch: expected {expected}, got {got}")]
    InvalidData { expected: usize, got: usize },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("matrix is numerically zero")]
    ZeroMatrix,

    #[error("matrix has fewer than {k} numerically independent columns (sigma_k = {sigma_k:e}, sigma_1 = {sigma_1:e})")]
    RankDeficient {
        k: usize,
        sigma_k: f64,
        sigma_1: f64,
    },

    #[error("swap loop did not terminate within {swaps} swaps")]
    NonConvergent { swaps: usize },

    #[error("{what} = {value} is out of range")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("matrix is not orthogonal (residual {residual:e})")]
    NotOrthogonal { residual: f64 },

    #[error("no nonzero states to aggregate")]
    EmptySpectrum,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("training diverged at step {step} (loss {loss:e})")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
