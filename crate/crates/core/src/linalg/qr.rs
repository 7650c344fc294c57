//! Householder QR, with and without greedy column pivoting.

use super::matrix::{dot, norm2, Matrix};

/// `m · Π = q · r` with `q` having orthonormal columns, `r` upper
/// triangular with non-negative, non-increasing diagonal and
/// `perm[p]` the original index of the column in position `p`.
#[derive(Debug, Clone)]
pub struct QrcpResult {
    pub q: Matrix,
    pub r: Matrix,
    pub perm: Vec<usize>,
}

impl QrcpResult {
    /// `‖Q R − M Π‖_F / ‖M‖_F`.
    pub fn reconstruction_error(&self, m: &Matrix) -> f64 {
        let qr = self.q.matmul(&self.r).expect("shapes from factorization");
        let mp = m.select_columns(&self.perm);
        let denom = m.frobenius_norm().max(f64::MIN_POSITIVE);
        qr.sub(&mp).expect("same shape").frobenius_norm() / denom
    }
}

/// QR with column pivoting: at each step the column with the largest
/// remaining residual norm is moved forward, ties going to the lowest
/// index. Rank-deficient inputs end with a zero trailing diagonal.
pub fn qrcp(m: &Matrix) -> QrcpResult {
    let (q, r, perm) = factor(m, true);
    QrcpResult { q, r, perm }
}

/// Plain Householder QR (thin), diagonal of `r` made non-negative.
pub fn householder_qr(m: &Matrix) -> (Matrix, Matrix) {
    let (q, r, _) = factor(m, false);
    (q, r)
}

fn factor(m: &Matrix, pivot: bool) -> (Matrix, Matrix, Vec<usize>) {
    let (rows, cols) = m.shape();
    let p = rows.min(cols);
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(p);

    for s in 0..p {
        if pivot {
            let mut best = s;
            let mut best_norm = -1.0;
            for j in s..cols {
                let nrm: f64 = (s..rows)
                    .map(|i| a.get(i, j) * a.get(i, j))
                    .sum::<f64>()
                    .sqrt();
                if nrm > best_norm {
                    best_norm = nrm;
                    best = j;
                }
            }
            if best != s {
                a.swap_cols(s, best);
                perm.swap(s, best);
            }
        }

        let x: Vec<f64> = (s..rows).map(|i| a.get(i, s)).collect();
        if x[1..].iter().all(|v| *v == 0.0) {
            reflectors.push(None);
            continue;
        }
        let normx = norm2(&x);
        let alpha = if x[0] >= 0.0 { -normx } else { normx };
        let mut v = x;
        v[0] -= alpha;
        let vv = dot(&v, &v);
        for j in s..cols {
            let proj: f64 = (s..rows).map(|i| v[i - s] * a.get(i, j)).sum();
            let tau = 2.0 * proj / vv;
            for i in s..rows {
                a[(i, j)] -= tau * v[i - s];
            }
        }
        a[(s, s)] = alpha;
        for i in s + 1..rows {
            a[(i, s)] = 0.0;
        }
        reflectors.push(Some(v));
    }

    let mut q = Matrix::from_fn(rows, p, |i, j| if i == j { 1.0 } else { 0.0 });
    for s in (0..p).rev() {
        if let Some(v) = &reflectors[s] {
            let vv = dot(v, v);
            for j in 0..p {
                let proj: f64 = (s..rows).map(|i| v[i - s] * q.get(i, j)).sum();
                let tau = 2.0 * proj / vv;
                for i in s..rows {
                    q[(i, j)] -= tau * v[i - s];
                }
            }
        }
    }

    let mut r = Matrix::from_fn(p, cols, |i, j| if j >= i { a.get(i, j) } else { 0.0 });
    for i in 0..p {
        if r.get(i, i) < 0.0 {
            for j in i..cols {
                r[(i, j)] = -r[(i, j)];
            }
            for k in 0..rows {
                q[(k, i)] = -q[(k, i)];
            }
        }
    }
    (q, r, perm)
}

/// Plane rotation `(c, s)` with `[c s; −s c] · [a; b] = [hypot(a, b); 0]`.
#[inline]
pub fn givens(a: f64, b: f64) -> (f64, f64) {
    if b == 0.0 {
        return (1.0, 0.0);
    }
    let r = a.hypot(b);
    (a / r, b / r)
}

/// Applies the rotation to rows `p` and `q` of `m`, columns `from..`.
pub fn apply_givens_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64, from: usize) {
    for j in from..m.cols() {
        let x = m.get(p, j);
        let y = m.get(q, j);
        m[(p, j)] = c * x + s * y;
        m[(q, j)] = -s * x + c * y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul_tn;
    use crate::random::{gaussian_matrix, rng_for};

    #[test]
    fn identity_pivots_in_order() {
        let res = qrcp(&Matrix::identity(4));
        assert_eq!(res.perm, vec![0, 1, 2, 3]);
        assert_eq!(res.r, Matrix::identity(4));
    }

    #[test]
    fn first_pivot_is_largest_column() {
        let m = Matrix::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]);
        let res = qrcp(&m);
        assert_eq!(res.perm[0], 1);
        assert_eq!(res.r.get(0, 0), 2.0);
        assert_eq!(res.r.get(1, 1), 0.0);
    }

    #[test]
    fn random_six_by_four_reconstructs() {
        let mut rng = rng_for(11, 0);
        let m = gaussian_matrix(&mut rng, 6, 4);
        let res = qrcp(&m);
        assert!(res.reconstruction_error(&m) <= 1e-10);
        for i in 1..4 {
            assert!(res.r.get(i, i).abs() <= res.r.get(i - 1, i - 1).abs());
        }
        let qtq = matmul_tn(&res.q, &res.q).unwrap();
        assert!(qtq.sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_has_zero_trailing_diagonal() {
        let mut rng = rng_for(5, 0);
        let a = gaussian_matrix(&mut rng, 6, 2);
        let b = gaussian_matrix(&mut rng, 2, 4);
        let m = a.matmul(&b).unwrap();
        let res = qrcp(&m);
        assert!(res.reconstruction_error(&m) <= 1e-10);
        let scale = res.r.get(0, 0);
        assert!(res.r.get(2, 2).abs() < 1e-12 * scale);
        assert!(res.r.get(3, 3).abs() < 1e-12 * scale);
    }

    #[test]
    fn wide_matrix_factorizes() {
        let mut rng = rng_for(9, 2);
        let m = gaussian_matrix(&mut rng, 3, 7);
        let res = qrcp(&m);
        assert_eq!(res.q.shape(), (3, 3));
        assert_eq!(res.r.shape(), (3, 7));
        assert!(res.reconstruction_error(&m) <= 1e-10);
    }

    #[test]
    fn givens_zeroes_second_component() {
        let mut m = Matrix::from_rows(&[&[3.0, 1.0], &[4.0, 2.0]]);
        let (c, s) = givens(3.0, 4.0);
        apply_givens_rows(&mut m, 0, 1, c, s, 0);
        assert!((m.get(0, 0) - 5.0).abs() < 1e-15);
        assert!(m.get(1, 0).abs() < 1e-15);
    }
}
