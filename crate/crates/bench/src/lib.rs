//! Input builders shared by the benchmarks.

use kqprune_core::linalg::Matrix;
use kqprune_core::random::{gaussian_matrix, rng_for};

/// Unit-norm rows, like the normalized query/key streams.
fn unit_rows(m: Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    Matrix::from_fn(rows, cols, |i, j| {
        let norm = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        m.get(i, j) / norm
    })
}

pub struct MixerInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn mixer_inputs(seq_len: usize, key_dim: usize, value_dim: usize, seed: u64) -> MixerInputs {
    let mut rng = rng_for(seed, 0);
    MixerInputs {
        q: unit_rows(gaussian_matrix(&mut rng, seq_len, key_dim)),
        k: unit_rows(gaussian_matrix(&mut rng, seq_len, key_dim)),
        v: gaussian_matrix(&mut rng, seq_len, value_dim),
        beta: vec![0.5; seq_len],
        alpha: vec![0.95; seq_len],
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    gaussian_matrix(&mut rng_for(seed, 1), rows, cols)
}
