//! Strong rank-revealing QR column subset selection (Gu–Eisenstat).
//!
//! Starting from QR with column pivoting, `M Π = Q [A B; 0 C]`, basis column
//! `i` and candidate column `j` are swapped while the gain
//!
//! ```text
//! ρ_ij = sqrt( (A⁻¹B)_ij² + (γ_j / ω_i)² ),   γ_j = ‖C[:, j]‖₂,   ω_i = 1 / ‖(A⁻¹)[i, :]‖₂
//! ```
//!
//! exceeds `f`. Each accepted swap multiplies `|det A|` by exactly `ρ_ij`,
//! so the loop terminates; on exit every `ρ_ij ≤ f`, which gives
//! `σ_min(A) ≥ σ_k(M) / sqrt(1 + f² k (n − k))`.
//!
//! After a swap the triangular factor is restored with Givens rotations,
//! then `ω`, `γ` and `A⁻¹B` are recomputed from the new factor.

use super::matrix::{norm2, Matrix};
use super::qr::{apply_givens_rows, givens, householder_qr, qrcp};
use super::svd::svd_values;
use crate::error::{Error, Result};

/// Swap tolerance used when the caller has no preference.
pub const DEFAULT_F: f64 = 2.0;

/// Relative slack on `ρ ≤ f` absorbing roundoff at the boundary.
const RHO_SLACK: f64 = 1e-12;

/// Working factorization for the swap loop.
#[derive(Debug, Clone)]
pub struct SrrqrState {
    /// Upper-triangular factor, `min(rows, cols) × cols`.
    pub r_factor: Matrix,
    /// `perm[p]` is the original column sitting at position `p`.
    pub perm: Vec<usize>,
    /// `ω_i(A)`, length `k`.
    pub omega: Vec<f64>,
    /// `γ_j(C)`, length `cols − k`.
    pub gamma: Vec<f64>,
    pub k: usize,
    pub f: f64,
    /// `A⁻¹B`, `k × (cols − k)`.
    pub u: Matrix,
}

/// One accepted swap.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapRecord {
    pub basis_pos: usize,
    pub candidate_pos: usize,
    pub removed: usize,
    pub inserted: usize,
    pub rho: f64,
    pub abs_det_before: f64,
    pub abs_det_after: f64,
}

#[derive(Debug, Clone)]
pub struct SrrqrOutcome {
    /// `Π[0..k]`, in factor order.
    pub selected: Vec<usize>,
    pub swaps: Vec<SwapRecord>,
    pub max_rho: f64,
    pub state: SrrqrState,
}

impl SrrqrState {
    /// QRCP of `m` followed by the auxiliary quantities for rank `k`.
    pub fn new(m: &Matrix, k: usize, f: f64) -> Result<Self> {
        validate(m, k, f)?;
        let qr = qrcp(m);
        Ok(Self::from_factor(qr.r, qr.perm, k, f))
    }

    /// Wraps an existing upper-triangular factor.
    pub fn from_factor(r_factor: Matrix, perm: Vec<usize>, k: usize, f: f64) -> Self {
        let n = r_factor.cols();
        let mut state = Self {
            r_factor,
            perm,
            omega: vec![0.0; k],
            gamma: vec![0.0; n - k],
            k,
            f,
            u: Matrix::zeros(k, n - k),
        };
        state.refresh();
        state
    }

    pub fn cols(&self) -> usize {
        self.r_factor.cols()
    }

    pub fn selected(&self) -> Vec<usize> {
        self.perm[..self.k].to_vec()
    }

    /// `|det A| = ∏ |R_ii|` over the leading block.
    pub fn abs_det(&self) -> f64 {
        (0..self.k).map(|i| self.r_factor.get(i, i).abs()).product()
    }

    pub fn rho(&self, i: usize, j: usize) -> f64 {
        let ratio = self.gamma[j] / self.omega[i];
        (self.u.get(i, j).powi(2) + ratio * ratio).sqrt()
    }

    /// `ρ` for every (basis, candidate) pair.
    pub fn rho_matrix(&self) -> Matrix {
        Matrix::from_fn(self.k, self.cols() - self.k, |i, j| self.rho(i, j))
    }

    /// Largest `ρ_ij` and its position; the first maximal pair in
    /// row-major order wins ties.
    pub fn max_rho(&self) -> (f64, usize, usize) {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in 0..self.k {
            for j in 0..self.cols() - self.k {
                let r = self.rho(i, j);
                if r > best.0 {
                    best = (r, i, j);
                }
            }
        }
        best
    }

    /// Exchanges basis column `i` with candidate column `j` (position
    /// `k + j`) and retriangularizes.
    pub fn swap(&mut self, i: usize, j: usize) {
        let k = self.k;
        let p = self.r_factor.rows();
        let r = &mut self.r_factor;

        // Rotate basis column i to the end of the leading block; the block
        // becomes upper Hessenberg from row i on.
        for c in i..k - 1 {
            r.swap_cols(c, c + 1);
            self.perm.swap(c, c + 1);
        }
        for c in i..k - 1 {
            let (cs, sn) = givens(r.get(c, c), r.get(c + 1, c));
            apply_givens_rows(r, c, c + 1, cs, sn, c);
            r[(c + 1, c)] = 0.0;
        }

        // Bring the candidate to position k and fold its trailing part
        // into a single entry on row k.
        r.swap_cols(k, k + j);
        self.perm.swap(k, k + j);
        for row in (k + 1..p).rev() {
            let (cs, sn) = givens(r.get(row - 1, k), r.get(row, k));
            apply_givens_rows(r, row - 1, row, cs, sn, k);
            r[(row, k)] = 0.0;
        }

        // Exchange the boundary columns; one rotation fixes the 2×2 bump.
        r.swap_cols(k - 1, k);
        self.perm.swap(k - 1, k);
        if k < p {
            let (cs, sn) = givens(r.get(k - 1, k - 1), r.get(k, k - 1));
            apply_givens_rows(r, k - 1, k, cs, sn, k - 1);
            r[(k, k - 1)] = 0.0;
        }

        self.refresh();
    }

    fn refresh(&mut self) {
        let k = self.k;
        let n = self.cols();
        let p = self.r_factor.rows();
        let a_inv = upper_triangular_inverse(&self.r_factor, k);
        for i in 0..k {
            let row_norm = norm2(a_inv.row(i));
            self.omega[i] = if row_norm > 0.0 { 1.0 / row_norm } else { 0.0 };
        }
        for j in 0..n - k {
            let col = k + j;
            let tail: f64 = (k..p).map(|row| self.r_factor.get(row, col).powi(2)).sum();
            self.gamma[j] = tail.sqrt();
            for i in 0..k {
                let mut acc = 0.0;
                for l in i..k {
                    acc += a_inv.get(i, l) * self.r_factor.get(l, col);
                }
                self.u[(i, j)] = acc;
            }
        }
    }
}

/// Inverse of the leading `k × k` upper-triangular block of `r`.
fn upper_triangular_inverse(r: &Matrix, k: usize) -> Matrix {
    let mut inv = Matrix::zeros(k, k);
    for col in 0..k {
        for row in (0..=col).rev() {
            let rhs = if row == col { 1.0 } else { 0.0 };
            let mut acc = rhs;
            for l in row + 1..=col {
                acc -= r.get(row, l) * inv.get(l, col);
            }
            inv[(row, col)] = acc / r.get(row, row);
        }
    }
    inv
}

fn validate(m: &Matrix, k: usize, f: f64) -> Result<()> {
    let n = m.cols();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "rank {k} must satisfy 1 <= k < {n}"
        )));
    }
    if !(f >= 1.0 && f.is_finite()) {
        return Err(Error::OutOfRange {
            what: "f",
            value: f,
        });
    }
    let s = svd_values(m);
    let sigma_1 = s.first().copied().unwrap_or(0.0);
    let sigma_k = s.get(k - 1).copied().unwrap_or(0.0);
    if sigma_1 == 0.0 || sigma_k <= 1e-12 * sigma_1 {
        return Err(Error::RankDeficient {
            k,
            sigma_k,
            sigma_1,
        });
    }
    Ok(())
}

/// Selects `k` well-conditioned columns of `m`. Returns `Π[0..k]`.
pub fn srrqr_select(m: &Matrix, k: usize, f: f64) -> Result<Vec<usize>> {
    srrqr_select_traced(m, k, f).map(|o| o.selected)
}

/// As [`srrqr_select`], also reporting every accepted swap.
pub fn srrqr_select_traced(m: &Matrix, k: usize, f: f64) -> Result<SrrqrOutcome> {
    let mut state = SrrqrState::new(m, k, f)?;
    let cap = 10 * m.cols() * k;
    let mut swaps = Vec::new();
    loop {
        let (rho, i, j) = state.max_rho();
        if rho <= f * (1.0 + RHO_SLACK) {
            return Ok(SrrqrOutcome {
                selected: state.selected(),
                swaps,
                max_rho: rho,
                state,
            });
        }
        if swaps.len() >= cap {
            return Err(Error::NonConvergent { swaps: swaps.len() });
        }
        let before = state.abs_det();
        let removed = state.perm[i];
        let inserted = state.perm[k + j];
        state.swap(i, j);
        swaps.push(SwapRecord {
            basis_pos: i,
            candidate_pos: j,
            removed,
            inserted,
            rho,
            abs_det_before: before,
            abs_det_after: state.abs_det(),
        });
    }
}

/// `ρ` matrix for an arbitrary selection: rows follow `selected`, columns
/// follow the remaining indices in ascending order. The value depends only
/// on the selected set, not on the factorization used.
pub fn rho_for_selection(m: &Matrix, selected: &[usize], f: f64) -> Result<(Matrix, Vec<usize>)> {
    let n = m.cols();
    let k = selected.len();
    if k == 0 || k >= n || selected.iter().any(|&c| c >= n) {
        return Err(Error::InvalidArgument(
            "selection must be a proper, in-range subset".into(),
        ));
    }
    let mut order = selected.to_vec();
    let rest: Vec<usize> = (0..n).filter(|c| !selected.contains(c)).collect();
    if rest.len() != n - k {
        return Err(Error::InvalidArgument(
            "selection contains duplicates".into(),
        ));
    }
    order.extend_from_slice(&rest);
    let (_, r) = householder_qr(&m.select_columns(&order));
    if (0..k).any(|i| r.get(i, i) == 0.0) {
        return Err(Error::RankDeficient {
            k,
            sigma_k: 0.0,
            sigma_1: m.frobenius_norm(),
        });
    }
    let state = SrrqrState::from_factor(r, order, k, f);
    Ok((state.rho_matrix(), rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{gaussian_matrix, rng_for};

    #[test]
    fn duplicate_columns_never_both_selected() {
        let m = Matrix::from_rows(&[&[1.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 0.0, 0.0]]);
        let mut sel = srrqr_select(&m, 2, DEFAULT_F).unwrap();
        sel.sort();
        assert!(sel == vec![0, 2] || sel == vec![1, 2], "{sel:?}");
    }

    #[test]
    fn identity_selection_is_perfectly_conditioned() {
        let m = Matrix::identity(4);
        let sel = srrqr_select(&m, 2, DEFAULT_F).unwrap();
        assert_ne!(sel[0], sel[1]);
        let s = svd_values(&m.select_columns(&sel));
        assert!((s[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn swap_multiplies_determinant_by_rho() {
        let mut rng = rng_for(21, 0);
        let m = gaussian_matrix(&mut rng, 8, 10);
        let mut state = SrrqrState::new(&m, 4, 1.0).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let mut trial = state.clone();
                let before = trial.abs_det();
                let rho = trial.rho(i, j);
                trial.swap(i, j);
                let ratio = trial.abs_det() / before;
                assert!(
                    (ratio - rho).abs() <= 1e-9 * rho,
                    "({i},{j}): {ratio} vs {rho}"
                );
            }
        }
        // The factor remains a valid QR of the permuted input.
        state.swap(1, 3);
        let mp = m.select_columns(&state.perm);
        let (_, r_ref) = householder_qr(&mp);
        for i in 0..4 {
            assert!((state.r_factor.get(i, i).abs() - r_ref.get(i, i).abs()).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = Matrix::identity(3);
        assert!(matches!(
            srrqr_select(&m, 0, 2.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            srrqr_select(&m, 3, 2.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            srrqr_select(&m, 1, 0.5),
            Err(Error::OutOfRange { .. })
        ));
        let low = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]);
        assert!(matches!(
            srrqr_select(&low, 2, 2.0),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn rho_for_selection_matches_loop_state() {
        let mut rng = rng_for(4, 4);
        let m = gaussian_matrix(&mut rng, 9, 7);
        let out = srrqr_select_traced(&m, 3, 2.0).unwrap();
        let (rho, _) = rho_for_selection(&m, &out.selected, 2.0).unwrap();
        assert!((rho.max_abs() - out.max_rho).abs() < 1e-10 * out.max_rho.max(1.0));
    }
}
