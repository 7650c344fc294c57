//! Seeded random streams and random matrix helpers.
//!
//! Every consumer draws from a `ChaCha8Rng` keyed by `(seed, stream)`, so a
//! trial or a sequence can be regenerated independently of its neighbours.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{qr, Matrix};

pub type StreamRng = ChaCha8Rng;

/// Independent RNG stream `stream` under `seed`.
pub fn rng_for(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| gaussian(rng))
}

/// Uniform direction on the unit sphere.
pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = crate::linalg::norm2(&v);
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Haar-distributed orthogonal matrix: Q factor of a Gaussian matrix whose
/// R factor has a non-negative diagonal.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Matrix {
    let g = gaussian_matrix(rng, n, n);
    qr::householder_qr(&g).0
}

/// Random `rows × cols` matrix with prescribed singular values
/// (`U diag(σ) Vᵀ` with Haar factors).
pub fn matrix_with_spectrum<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    sigma: &[f64],
) -> Matrix {
    let r = rows.min(cols);
    assert!(sigma.len() <= r);
    let u = random_orthogonal(rng, rows);
    let v = random_orthogonal(rng, cols);
    let mut out = Matrix::zeros(rows, cols);
    for (k, s) in sigma.iter().enumerate() {
        for i in 0..rows {
            let uik = u.get(i, k) * s;
            for j in 0..cols {
                out[(i, j)] += uik * v.get(j, k);
            }
        }
    }
    out
}
