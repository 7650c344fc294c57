//! Dense linear algebra on small row-major matrices.

pub mod matrix;
pub mod qr;
pub mod srrqr;
pub mod svd;

pub use matrix::{axpy, dot, matmul, matmul_nt, matmul_tn, norm2, Matrix};
pub use qr::{householder_qr, qrcp, QrcpResult};
pub use srrqr::{
    rho_for_selection, srrqr_select, srrqr_select_traced, SrrqrOutcome, SrrqrState, SwapRecord,
    DEFAULT_F,
};
pub use svd::{condition_number, numeric_rank, svd, svd_values, Svd};
