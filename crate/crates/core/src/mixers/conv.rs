//! Causal depthwise 1-D convolution.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// `out[t, i] = Σ_j filters[i, j] · x[t − j, i]`, zero history before `t = 0`.
pub fn conv1d_causal(x: &Matrix, filters: &Matrix) -> Result<Matrix> {
    let (t_len, c) = x.shape();
    if filters.rows() != c || filters.cols() == 0 {
        return Err(Error::DimensionMismatch {
            op: "conv1d_causal",
            left: x.shape(),
            right: filters.shape(),
        });
    }
    let l = filters.cols();
    let mut out = Matrix::zeros(t_len, c);
    for t in 0..t_len {
        let orow = out.row_mut(t);
        for j in 0..l.min(t + 1) {
            let xrow = x.row(t - j);
            for i in 0..c {
                orow[i] += filters.get(i, j) * xrow[i];
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv1d_causal` given the upstream gradient `dout`:
/// returns `(dx, dfilters)`.
pub fn conv1d_causal_backward(x: &Matrix, filters: &Matrix, dout: &Matrix) -> (Matrix, Matrix) {
    let (t_len, c) = x.shape();
    let l = filters.cols();
    let mut dx = Matrix::zeros(t_len, c);
    let mut dw = Matrix::zeros(c, l);
    for t in 0..t_len {
        let g = dout.row(t);
        for j in 0..l.min(t + 1) {
            let xrow = x.row(t - j);
            for i in 0..c {
                dw[(i, j)] += g[i] * xrow[i];
            }
            let dxrow = dx.row_mut(t - j);
            for i in 0..c {
                dxrow[i] += g[i] * filters.get(i, j);
            }
        }
    }
    (dx, dw)
}
