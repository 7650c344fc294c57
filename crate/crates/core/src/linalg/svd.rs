//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns are rotated pairwise until every pair is orthogonal to a
//! relative tolerance; the column norms are then the singular values.
//! Accurate for the small dense matrices this crate deals with.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 80;

/// Thin SVD `m = u · diag(sigma) · vᵀ`, `sigma` non-increasing.
/// With `r = min(rows, cols)`, `u` is `rows × r` and `v` is `cols × r`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

pub fn svd(m: &Matrix) -> Svd {
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose());
        Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    }
}

/// Singular values in non-increasing order.
pub fn svd_values(m: &Matrix) -> Vec<f64> {
    svd(m).sigma
}

/// `σ_max / σ_min` with `σ_min` the smallest of the `min(rows, cols)`
/// singular values; `+∞` once `σ_min < 1e-14 · σ_max`.
pub fn condition_number(m: &Matrix) -> Result<f64> {
    let s = svd_values(m);
    condition_from_values(&s)
}

pub(crate) fn condition_from_values(s: &[f64]) -> Result<f64> {
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let smin = *s.last().expect("non-empty");
    if smin < 1e-14 * smax {
        Ok(f64::INFINITY)
    } else {
        Ok(smax / smin)
    }
}

/// Number of singular values above `rel_tol · σ_1`.
pub fn numeric_rank(m: &Matrix, rel_tol: f64) -> usize {
    let s = svd_values(m);
    match s.first() {
        Some(&s1) if s1 > 0.0 => s.iter().filter(|v| **v > rel_tol * s1).count(),
        _ => 0,
    }
}

fn jacobi_tall(m: &Matrix) -> Svd {
    let (rows, n) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| norms[*b].partial_cmp(&norms[*a]).expect("finite norms"));

    let mut u = Matrix::zeros(rows, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > 0.0 {
            for i in 0..rows {
                u[(i, k)] = cols[j][i] / s;
            }
        }
        for i in 0..n {
            v[(i, k)] = vcols[j][i];
        }
    }
    Svd { u, sigma, v }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;
    use crate::random::{gaussian_matrix, random_orthogonal, rng_for};

    /// Real roots of the monic cubic `x³ + a x² + b x + c` with three real
    /// roots (trigonometric form).
    fn cubic_roots(a: f64, b: f64, c: f64) -> [f64; 3] {
        let p = b - a * a / 3.0;
        let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
        let r = (-p / 3.0).sqrt();
        let phi = ((3.0 * q) / (2.0 * p * r)).clamp(-1.0, 1.0).acos();
        let mut roots = [0.0; 3];
        for (k, root) in roots.iter_mut().enumerate() {
            *root = 2.0 * r * ((phi - 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() - a / 3.0;
        }
        roots.sort_by(|x, y| y.partial_cmp(x).unwrap());
        roots
    }

    #[test]
    fn identity_has_unit_values() {
        assert_eq!(svd_values(&Matrix::identity(5)), vec![1.0; 5]);
    }

    #[test]
    fn diagonal_values_sorted() {
        assert_eq!(
            svd_values(&Matrix::diag(&[1.0, 3.0, 2.0])),
            vec![3.0, 2.0, 1.0]
        );
    }

    #[test]
    fn three_by_three_matches_characteristic_polynomial() {
        for seed in 0..20 {
            let mut rng = rng_for(seed, 0);
            let m = gaussian_matrix(&mut rng, 3, 3);
            let g = matmul(&m.transpose(), &m).unwrap();
            let tr = g.get(0, 0) + g.get(1, 1) + g.get(2, 2);
            let minors = g.get(0, 0) * g.get(1, 1) - g.get(0, 1) * g.get(1, 0)
                + g.get(0, 0) * g.get(2, 2)
                - g.get(0, 2) * g.get(2, 0)
                + g.get(1, 1) * g.get(2, 2)
                - g.get(1, 2) * g.get(2, 1);
            let det = g.get(0, 0) * (g.get(1, 1) * g.get(2, 2) - g.get(1, 2) * g.get(2, 1))
                - g.get(0, 1) * (g.get(1, 0) * g.get(2, 2) - g.get(1, 2) * g.get(2, 0))
                + g.get(0, 2) * (g.get(1, 0) * g.get(2, 1) - g.get(1, 1) * g.get(2, 0));
            let eig = cubic_roots(-tr, minors, -det);
            let s = svd_values(&m);
            for k in 0..3 {
                let rel = (s[k] * s[k] - eig[k]).abs() / eig[k];
                assert!(rel <= 1e-8, "seed {seed}: {} vs {}", s[k] * s[k], eig[k]);
            }
        }
    }

    #[test]
    fn factors_reconstruct() {
        let mut rng = rng_for(1, 4);
        for (r, c) in [(7, 4), (4, 7), (5, 5)] {
            let m = gaussian_matrix(&mut rng, r, c);
            let f = svd(&m);
            let us = Matrix::from_fn(r, f.sigma.len(), |i, j| f.u.get(i, j) * f.sigma[j]);
            let back = matmul(&us, &f.v.transpose()).unwrap();
            assert!(back.sub(&m).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn unitary_invariance_of_condition_number() {
        let mut rng = rng_for(2, 0);
        let m = gaussian_matrix(&mut rng, 5, 5);
        let u = random_orthogonal(&mut rng, 5);
        let v = random_orthogonal(&mut rng, 5);
        let rotated = matmul(&matmul(&u, &m).unwrap(), &v.transpose()).unwrap();
        let a = condition_number(&m).unwrap();
        let b = condition_number(&rotated).unwrap();
        assert!((a - b).abs() <= 1e-9 * a);
    }

    #[test]
    fn condition_number_cases() {
        assert_eq!(condition_number(&Matrix::identity(5)).unwrap(), 1.0);
        assert_eq!(condition_number(&Matrix::diag(&[4.0, 1.0])).unwrap(), 4.0);
        assert_eq!(
            condition_number(&Matrix::diag(&[4.0, 0.0])).unwrap(),
            f64::INFINITY
        );
        assert_eq!(
            condition_number(&Matrix::zeros(2, 3)),
            Err(Error::ZeroMatrix)
        );
    }

    #[test]
    fn transpose_invariance() {
        let mut rng = rng_for(8, 8);
        let m = gaussian_matrix(&mut rng, 6, 3);
        let a = svd_values(&m);
        let b = svd_values(&m.transpose());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10 * a[0]);
        }
    }

    #[test]
    fn rank_of_product() {
        let mut rng = rng_for(3, 3);
        let a = gaussian_matrix(&mut rng, 6, 2);
        let b = gaussian_matrix(&mut rng, 2, 5);
        assert_eq!(numeric_rank(&matmul(&a, &b).unwrap(), 1e-10), 2);
        assert_eq!(numeric_rank(&Matrix::zeros(3, 3), 1e-10), 0);
    }
}
