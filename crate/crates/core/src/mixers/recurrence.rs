//! State recurrences: linear attention, the delta rule and its gated form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Which state update a mixer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `S ← S + v kᵀ`
    Linear,
    /// `S ← S (I − β k kᵀ) + β v kᵀ`
    Delta,
    /// `S ← S (α I − β k kᵀ) + β v kᵀ`
    Gated,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Linear, Variant::Delta, Variant::Gated];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Linear => "linear",
            Variant::Delta => "delta",
            Variant::Gated => "gated",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Variant::Linear),
            "delta" => Ok(Variant::Delta),
            "gated" => Ok(Variant::Gated),
            other => Err(Error::InvalidArgument(format!("unknown variant `{other}`"))),
        }
    }
}

/// Associative memory `S` (`d_v × d_k`), starting from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerState {
    pub s: Matrix,
}

impl MixerState {
    pub fn new(d_v: usize, d_k: usize) -> Self {
        Self {
            s: Matrix::zeros(d_v, d_k),
        }
    }
}

/// In-place `S ← S (α I − β k kᵀ) + γ v kᵀ`.
///
/// Written as `S[i, :] ← α S[i, :] + (γ v_i − β (S k)_i) kᵀ`, so one pass
/// computes `S k` and a second applies the rank-one correction.
pub fn general_update(s: &mut Matrix, k: &[f64], v: &[f64], alpha: f64, beta: f64, gamma: f64) {
    let d_k = s.cols();
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let sk = dot(row, k);
        let coef = gamma * v[i] - beta * sk;
        if alpha == 1.0 {
            for j in 0..d_k {
                row[j] += coef * k[j];
            }
        } else {
            for j in 0..d_k {
                row[j] = alpha * row[j] + coef * k[j];
            }
        }
    }
}

/// `S ← S + v kᵀ`.
pub fn linear_step(s: &mut Matrix, k: &[f64], v: &[f64]) {
    for i in 0..s.rows() {
        let vi = v[i];
        for (x, kj) in s.row_mut(i).iter_mut().zip(k) {
            *x += vi * kj;
        }
    }
}

fn check_unit_interval(what: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange { what, value })
    }
}

fn check_dims(s: &MixerState, k: &[f64], v: &[f64]) -> Result<()> {
    if s.s.cols() != k.len() || s.s.rows() != v.len() {
        return Err(Error::DimensionMismatch {
            op: "state update",
            left: s.s.shape(),
            right: (v.len(), k.len()),
        });
    }
    Ok(())
}

/// Delta-rule step. `k` is expected to be unit norm.
pub fn delta_step(s: &MixerState, k: &[f64], v: &[f64], beta: f64) -> Result<MixerState> {
    check_dims(s, k, v)?;
    check_unit_interval("beta", beta)?;
    let mut out = s.clone();
    general_update(&mut out.s, k, v, 1.0, beta, beta);
    Ok(out)
}

/// Gated delta-rule step with decay `alpha`.
pub fn gated_delta_step(
    s: &MixerState,
    k: &[f64],
    v: &[f64],
    beta: f64,
    alpha: f64,
) -> Result<MixerState> {
    check_dims(s, k, v)?;
    check_unit_interval("beta", beta)?;
    check_unit_interval("alpha", alpha)?;
    let mut out = s.clone();
    general_update(&mut out.s, k, v, alpha, beta, beta);
    Ok(out)
}

/// Runs `S_t = S_{t−1} + v_t k_tᵀ`, `o_t = S_t q_t` over the rows of
/// `q`, `k`, `v`. Returns `(O, S_T)`.
pub fn linear_attention_recurrent(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    check_streams(q, k, v)?;
    let t_len = q.rows();
    let mut s = Matrix::zeros(v.cols(), k.cols());
    let mut out = Matrix::zeros(t_len, v.cols());
    for t in 0..t_len {
        linear_step(&mut s, k.row(t), v.row(t));
        let o = s.matvec(q.row(t))?;
        out.row_mut(t).copy_from_slice(&o);
    }
    Ok((out, s))
}

/// `(Q Kᵀ ⊙ M) V` with `M` the lower-triangular causal mask.
pub fn linear_attention_parallel(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    check_streams(q, k, v)?;
    let t_len = q.rows();
    let mut out = Matrix::zeros(t_len, v.cols());
    for t in 0..t_len {
        for s in 0..=t {
            let w = dot(q.row(t), k.row(s));
            let vrow = v.row(s);
            for (o, x) in out.row_mut(t).iter_mut().zip(vrow) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}

fn check_streams(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.shape() != k.shape() || v.rows() != q.rows() {
        return Err(Error::DimensionMismatch {
            op: "attention streams",
            left: q.shape(),
            right: v.shape(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{numeric_rank, svd_values};
    use crate::random::{gaussian_matrix, gaussian_vec, rng_for, unit_vector};

    #[test]
    fn single_token_linear_attention() {
        let q = Matrix::from_rows(&[&[1.0, 2.0]]);
        let k = Matrix::from_rows(&[&[3.0, -1.0]]);
        let v = Matrix::from_rows(&[&[0.5, 1.0, 2.0]]);
        let (o, _) = linear_attention_recurrent(&q, &k, &v).unwrap();
        assert_eq!(o.row(0), &[0.5, 1.0, 2.0]);
        assert_eq!(linear_attention_parallel(&q, &k, &v).unwrap(), o);
    }

    #[test]
    fn query_orthogonal_to_keys_reads_nothing() {
        let k = Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let q = Matrix::from_rows(&[&[0.0, 0.0, 1.0], &[0.0, 0.0, 2.0]]);
        let v = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let (o, _) = linear_attention_recurrent(&q, &k, &v).unwrap();
        assert_eq!(o.max_abs(), 0.0);
    }

    #[test]
    fn recurrent_matches_parallel() {
        let mut rng = rng_for(7, 0);
        for t_len in [5, 8] {
            let q = gaussian_matrix(&mut rng, t_len, 4);
            let k = gaussian_matrix(&mut rng, t_len, 4);
            let v = gaussian_matrix(&mut rng, t_len, 3);
            let (a, _) = linear_attention_recurrent(&q, &k, &v).unwrap();
            let b = linear_attention_parallel(&q, &k, &v).unwrap();
            assert!(a.sub(&b).unwrap().frobenius_norm() <= 1e-12 * b.frobenius_norm());
        }
    }

    #[test]
    fn parallel_form_is_causal() {
        let mut rng = rng_for(7, 1);
        let q = gaussian_matrix(&mut rng, 6, 3);
        let mut k = gaussian_matrix(&mut rng, 6, 3);
        let mut v = gaussian_matrix(&mut rng, 6, 3);
        let before = linear_attention_parallel(&q, &k, &v).unwrap();
        k.row_mut(4)[0] += 5.0;
        v.row_mut(5)[2] -= 3.0;
        let after = linear_attention_parallel(&q, &k, &v).unwrap();
        for t in 0..4 {
            assert_eq!(before.row(t), after.row(t));
        }
    }

    #[test]
    fn delta_from_zero_writes_outer_product() {
        let s = MixerState::new(2, 2);
        let k = [0.6, 0.8];
        let v = [1.0, -2.0];
        let out = delta_step(&s, &k, &v, 1.0).unwrap();
        assert_eq!(out.s, Matrix::outer(&v, &k));
    }

    #[test]
    fn delta_overwrites_same_key() {
        let s = MixerState::new(2, 3);
        let k = [0.0, 0.6, 0.8];
        let s = delta_step(&s, &k, &[1.0, 2.0], 1.0).unwrap();
        let s = delta_step(&s, &k, &[-3.0, 0.5], 1.0).unwrap();
        let expect = Matrix::outer(&[-3.0, 0.5], &k);
        assert!(s.s.sub(&expect).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn beta_bounds() {
        let mut rng = rng_for(1, 1);
        let s = MixerState {
            s: gaussian_matrix(&mut rng, 3, 3),
        };
        let k = unit_vector(&mut rng, 3);
        let v = gaussian_vec(&mut rng, 3);
        assert!(matches!(
            delta_step(&s, &k, &v, 0.0),
            Err(Error::OutOfRange { .. })
        ));
        assert!(delta_step(&s, &k, &v, 1.5).is_err());
        let tiny = delta_step(&s, &k, &v, 1e-9).unwrap();
        assert!(tiny.s.sub(&s.s).unwrap().max_abs() < 1e-8);
        assert!(gated_delta_step(&s, &k, &v, 0.5, 0.0).is_err());
    }

    #[test]
    fn unit_gate_reduces_to_delta() {
        let mut rng = rng_for(1, 2);
        let s = MixerState {
            s: gaussian_matrix(&mut rng, 3, 4),
        };
        let k = unit_vector(&mut rng, 4);
        let v = gaussian_vec(&mut rng, 3);
        let a = delta_step(&s, &k, &v, 0.3).unwrap();
        let b = gated_delta_step(&s, &k, &v, 0.3, 1.0).unwrap();
        assert_eq!(a, b);
        let decay = gated_delta_step(&s, &k, &v, 1e-12, 0.7).unwrap();
        assert!(decay.s.sub(&s.s.scale(0.7)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn gated_rank_bounded_by_streams() {
        let mut rng = rng_for(5, 5);
        let mut st = MixerState::new(6, 6);
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for t in 1..=8 {
            let k = unit_vector(&mut rng, 6);
            let v = gaussian_vec(&mut rng, 6);
            st = gated_delta_step(&st, &k, &v, 0.4, 0.9).unwrap();
            keys.push(k);
            vals.push(v);
            let kr: Vec<&[f64]> = keys.iter().map(|x| x.as_slice()).collect();
            let vr: Vec<&[f64]> = vals.iter().map(|x| x.as_slice()).collect();
            let rk = numeric_rank(&Matrix::from_rows(&kr), 1e-10);
            let rv = numeric_rank(&Matrix::from_rows(&vr), 1e-10);
            let rs = numeric_rank(&st.s, 1e-10);
            assert!(rs <= rk.min(rv) && rk.min(rv) <= t);
        }
        assert!(svd_values(&st.s)[0] > 0.0);
    }
}
