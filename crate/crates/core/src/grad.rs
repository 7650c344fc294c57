//! Reverse-mode gradients through the mixer layer, losses and optimizers.
//!
//! The recurrence is unrolled with every state `S_0 … S_T` kept from the
//! forward pass. For `S_t = S_{t−1}(α I − β k kᵀ) + β v kᵀ` and upstream
//! `G = ∂L/∂S_t`, with `g = G k` and `s = S_{t−1} k`:
//!
//! ```text
//! ∂L/∂S_{t−1} = α G − β g kᵀ
//! ∂L/∂α       = ⟨G, S_{t−1}⟩
//! ∂L/∂β       = gᵀ (v − s)
//! ∂L/∂v       = β g
//! ∂L/∂k       = β Gᵀ (v − s) − β S_{t−1}ᵀ g
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul_nt, matmul_tn, svd_values, Matrix};
use crate::mixers::conv::conv1d_causal_backward;
use crate::mixers::layer::{forward_cached, HeadCache, LayerCache};
use crate::mixers::{silu_grad, LayerParams, Variant};

/// Gradients share the parameter layout.
pub type ParamGrads = LayerParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1/(2T) Σ_t ‖y_t − target_t‖²`.
    SquaredError,
    /// Softmax cross-entropy against target distributions, averaged over
    /// the rows whose target is not all zero.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub targets: Matrix,
}

impl LossSpec {
    pub fn squared_error(targets: Matrix) -> Self {
        Self {
            kind: LossKind::SquaredError,
            targets,
        }
    }

    pub fn cross_entropy(targets: Matrix) -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            targets,
        }
    }

    /// Loss value and `∂L/∂y`.
    pub fn evaluate(&self, y: &Matrix) -> Result<(f64, Matrix)> {
        if y.shape() != self.targets.shape() {
            return Err(Error::DimensionMismatch {
                op: "loss",
                left: y.shape(),
                right: self.targets.shape(),
            });
        }
        let (rows, cols) = y.shape();
        let mut dy = Matrix::zeros(rows, cols);
        let value = match self.kind {
            LossKind::SquaredError => {
                let scale = 1.0 / rows as f64;
                let mut acc = 0.0;
                for t in 0..rows {
                    for j in 0..cols {
                        let d = y.get(t, j) - self.targets.get(t, j);
                        acc += d * d;
                        dy[(t, j)] = d * scale;
                    }
                }
                0.5 * acc * scale
            }
            LossKind::CrossEntropy => {
                let active: Vec<usize> = (0..rows)
                    .filter(|&t| self.targets.row(t).iter().any(|p| *p != 0.0))
                    .collect();
                if active.is_empty() {
                    return Ok((0.0, dy));
                }
                let scale = 1.0 / active.len() as f64;
                let mut acc = 0.0;
                for &t in &active {
                    let row = y.row(t);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                    let lse = m + z.ln();
                    let target = self.targets.row(t);
                    let mass: f64 = target.iter().sum();
                    for j in 0..cols {
                        acc -= target[j] * (row[j] - lse);
                        dy[(t, j)] = scale * (mass * (row[j] - lse).exp() - target[j]);
                    }
                }
                acc * scale
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok((value, dy))
    }
}

/// Loss and parameter gradients of one layer applied to `x`.
pub fn layer_backward(
    params: &LayerParams,
    x: &Matrix,
    variant: Variant,
    loss: &LossSpec,
) -> Result<(f64, ParamGrads)> {
    let cache = forward_cached(params, x, variant, true)?;
    let (value, dy) = loss.evaluate(&cache.y)?;
    let mut grads = params.zeros_like();
    backward_from_cache(params, x, variant, &cache, &dy, &mut grads)?;
    Ok((value, grads))
}

/// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
pub(crate) fn backward_from_cache(
    params: &LayerParams,
    x: &Matrix,
    variant: Variant,
    cache: &LayerCache,
    dy: &Matrix,
    grads: &mut ParamGrads,
) -> Result<Matrix> {
    let t_len = x.rows();
    let cat = cache.o_cat.cols();

    grads.w_o.add_scaled(1.0, &matmul_tn(&cache.y_norm, dy)?);
    let dyn_ = matmul_nt(dy, &params.w_o)?;

    // RMSNorm: y = o / r, r = sqrt(‖o‖²/n + ε).
    let mut do_cat = Matrix::zeros(t_len, cat);
    let n = cat as f64;
    for t in 0..t_len {
        let o = cache.o_cat.row(t);
        let g = dyn_.row(t);
        let r = cache.rms[t];
        let c = dot(o, g) / (n * r * r * r);
        for (d, (oi, gi)) in do_cat.row_mut(t).iter_mut().zip(o.iter().zip(g)) {
            *d = gi / r - oi * c;
        }
    }

    let mut dx = Matrix::zeros(t_len, x.cols());
    let mut offset = 0;
    for ((hp, hc), hg) in params
        .heads
        .iter()
        .zip(&cache.heads)
        .zip(grads.heads.iter_mut())
    {
        let d_v = hc.v.cols();
        let d_o = do_cat.block(0, t_len, offset, offset + d_v);
        offset += d_v;
        let hb = head_backward(hc, &d_o, variant);

        // Gates.
        let mut dz_beta = vec![0.0; t_len];
        let mut dz_alpha = vec![0.0; t_len];
        for t in 0..t_len {
            let b = hc.beta[t];
            dz_beta[t] = hb.dbeta[t] * b * (1.0 - b);
            if variant == Variant::Gated {
                let a = hc.alpha[t];
                dz_alpha[t] = hb.dalpha[t] * a * (1.0 - a);
            }
        }
        let wb = hp.w_beta.col(0);
        let wa = hp.w_alpha.col(0);
        for t in 0..t_len {
            let xt = x.row(t);
            for i in 0..x.cols() {
                hg.w_beta[(i, 0)] += xt[i] * dz_beta[t];
                hg.w_alpha[(i, 0)] += xt[i] * dz_alpha[t];
            }
            let dxt = dx.row_mut(t);
            for i in 0..dxt.len() {
                dxt[i] += wb[i] * dz_beta[t] + wa[i] * dz_alpha[t];
            }
        }

        // Normalization, SiLU, convolution, projection for each stream.
        let dcq = silu_back(&hc.cq, &norm_back(&hc.aq, &hc.q_norm, &hb.dq));
        let dck = silu_back(&hc.ck, &norm_back(&hc.ak, &hc.k_norm, &hb.dk));
        let dcv = silu_back(&hc.cv, &hb.dv);
        for (dc, z, filt, dfilt, w, dw) in [
            (
                &dcq,
                &hc.zq,
                &hp.conv_q,
                &mut hg.conv_q,
                &hp.w_q,
                &mut hg.w_q,
            ),
            (
                &dck,
                &hc.zk,
                &hp.conv_k,
                &mut hg.conv_k,
                &hp.w_k,
                &mut hg.w_k,
            ),
            (
                &dcv,
                &hc.zv,
                &hp.conv_v,
                &mut hg.conv_v,
                &hp.w_v,
                &mut hg.w_v,
            ),
        ] {
            let (dz, df) = conv1d_causal_backward(z, filt, dc);
            dfilt.add_scaled(1.0, &df);
            dw.add_scaled(1.0, &matmul_tn(x, &dz)?);
            dx.add_scaled(1.0, &matmul_nt(&dz, w)?);
        }
    }
    Ok(dx)
}

struct HeadBackward {
    dq: Matrix,
    dk: Matrix,
    dv: Matrix,
    dbeta: Vec<f64>,
    dalpha: Vec<f64>,
}

fn head_backward(hc: &HeadCache, d_o: &Matrix, variant: Variant) -> HeadBackward {
    let t_len = hc.q.rows();
    let d_k = hc.q.cols();
    let d_v = hc.v.cols();
    let mut dq = Matrix::zeros(t_len, d_k);
    let mut dk = Matrix::zeros(t_len, d_k);
    let mut dv = Matrix::zeros(t_len, d_v);
    let mut dbeta = vec![0.0; t_len];
    let mut dalpha = vec![0.0; t_len];
    let mut g = Matrix::zeros(d_v, d_k);
    let mut gk = vec![0.0; d_v];
    let mut sk = vec![0.0; d_v];
    let mut resid = vec![0.0; d_v];

    for t in (0..t_len).rev() {
        let q = hc.q.row(t);
        let k = hc.k.row(t);
        let v = hc.v.row(t);
        let s_t = &hc.states[t + 1];
        let s_prev = &hc.states[t];
        let dot_t = d_o.row(t);

        // Readout o_t = S_t q_t.
        let dqt = dq.row_mut(t);
        for i in 0..d_v {
            let di = dot_t[i];
            if di != 0.0 {
                let srow = s_t.row(i);
                let grow = g.row_mut(i);
                for j in 0..d_k {
                    dqt[j] += srow[j] * di;
                    grow[j] += di * q[j];
                }
            }
        }

        match variant {
            Variant::Linear => {
                let dkt = dk.row_mut(t);
                let dvt = dv.row_mut(t);
                for i in 0..d_v {
                    let grow = g.row(i);
                    dvt[i] = dot(grow, k);
                    for j in 0..d_k {
                        dkt[j] += grow[j] * v[i];
                    }
                }
            }
            Variant::Delta | Variant::Gated => {
                let beta = hc.beta[t];
                let alpha = hc.alpha[t];
                let mut db = 0.0;
                let mut da = 0.0;
                for i in 0..d_v {
                    gk[i] = dot(g.row(i), k);
                    sk[i] = dot(s_prev.row(i), k);
                    resid[i] = v[i] - sk[i];
                    db += gk[i] * resid[i];
                    if variant == Variant::Gated {
                        da += dot(g.row(i), s_prev.row(i));
                    }
                }
                dbeta[t] = db;
                dalpha[t] = da;
                let dvt = dv.row_mut(t);
                for i in 0..d_v {
                    dvt[i] = beta * gk[i];
                }
                let dkt = dk.row_mut(t);
                for i in 0..d_v {
                    let grow = g.row(i);
                    let srow = s_prev.row(i);
                    let a = beta * resid[i];
                    let b = beta * gk[i];
                    for j in 0..d_k {
                        dkt[j] += grow[j] * a - srow[j] * b;
                    }
                }
                // Propagate to S_{t−1}.
                for i in 0..d_v {
                    let c = beta * gk[i];
                    let grow = g.row_mut(i);
                    for j in 0..d_k {
                        grow[j] = alpha * grow[j] - c * k[j];
                    }
                }
            }
        }
    }
    HeadBackward {
        dq,
        dk,
        dv,
        dbeta,
        dalpha,
    }
}

/// Backward of `u = a / sqrt(‖a‖² + ε)` row-wise, given stored norms.
fn norm_back(a: &Matrix, norms: &[f64], du: &Matrix) -> Matrix {
    let mut da = Matrix::zeros(a.rows(), a.cols());
    for t in 0..a.rows() {
        let n = norms[t];
        let arow = a.row(t);
        let g = du.row(t);
        let c = dot(arow, g) / (n * n * n);
        for (d, (ai, gi)) in da.row_mut(t).iter_mut().zip(arow.iter().zip(g)) {
            *d = gi / n - ai * c;
        }
    }
    da
}

fn silu_back(pre: &Matrix, dout: &Matrix) -> Matrix {
    Matrix::from_fn(pre.rows(), pre.cols(), |i, j| {
        dout.get(i, j) * silu_grad(pre.get(i, j))
    })
}

/// Condition number of the map `W_q ↦ S W_qᵀ x` (`W_q` stored `h × d_k`),
/// assembled column by column from unit perturbations of `W_q`. The
/// Jacobian equals `xᵀ ⊗ S` up to ordering, so its leading
/// `min(d_v, d_k)` singular values are `‖x‖ σ_i(S)`.
pub fn query_jacobian_condition(s: &Matrix, x: &[f64]) -> Result<f64> {
    if s.frobenius_norm() == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    if x.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidArgument("x must be nonzero".into()));
    }
    let (d_v, d_k) = s.shape();
    let h = x.len();
    let mut jac = Matrix::zeros(d_v, h * d_k);
    let mut w = Matrix::zeros(h, d_k);
    for a in 0..h {
        for b in 0..d_k {
            w[(a, b)] = 1.0;
            let q = w.matvec_t(x)?;
            let o = s.matvec(&q)?;
            for i in 0..d_v {
                jac[(i, a * d_k + b)] = o[i];
            }
            w[(a, b)] = 0.0;
        }
    }
    let sv = svd_values(&jac);
    crate::linalg::svd::condition_from_values(&sv[..d_v.min(d_k)])
}

/// Anything exposing its weights as an ordered list of matrices.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn grad_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|m| m.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl ParamSet for LayerParams {
    fn tensors(&self) -> Vec<&Matrix> {
        LayerParams::tensors(self)
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        LayerParams::tensors_mut(self)
    }
}

/// `θ ← θ − lr · g`.
pub fn sgd_step<P: ParamSet + ?Sized>(params: &mut P, grads: &P, lr: f64) {
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        p.add_scaled(-lr, g);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(params: &P, hyper: AdamHyper) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|m| vec![0.0; m.data().len()])
            .collect();
        Self {
            hyper,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<P: ParamSet + ?Sized>(params: &mut P, grads: &P, state: &mut AdamState) {
    state.step += 1;
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pi, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_e |g_e − fd_e| / max(|g_e|, |fd_e|, floor)`.
    pub max_rel_error: f64,
    /// `‖g − fd‖_∞ / ‖fd‖_∞` over all parameters.
    pub normwise_error: f64,
    pub entries: usize,
}

/// Compares [`layer_backward`] with central finite differences of step
/// `h` over every parameter entry.
pub fn finite_difference_check(
    params: &LayerParams,
    x: &Matrix,
    variant: Variant,
    loss: &LossSpec,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let (_, grads) = layer_backward(params, x, variant, loss)?;
    let eval = |p: &LayerParams| -> Result<f64> {
        let cache = forward_cached(p, x, variant, false)?;
        Ok(loss.evaluate(&cache.y)?.0)
    };
    let analytic: Vec<f64> = grads
        .tensors()
        .iter()
        .flat_map(|m| m.data().to_vec())
        .collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = params.clone();
    let counts: Vec<usize> = params.tensors().iter().map(|m| m.data().len()).collect();
    for (ti, &count) in counts.iter().enumerate() {
        for e in 0..count {
            let orig = work.tensors()[ti].data()[e];
            work.tensors_mut()[ti].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work.tensors_mut()[ti].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work.tensors_mut()[ti].data_mut()[e] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
    }
    let mut max_rel: f64 = 0.0;
    let mut max_diff: f64 = 0.0;
    let mut max_fd: f64 = 0.0;
    for (g, fd) in analytic.iter().zip(&numeric) {
        let diff = (g - fd).abs();
        max_rel = max_rel.max(diff / g.abs().max(fd.abs()).max(floor));
        max_diff = max_diff.max(diff);
        max_fd = max_fd.max(fd.abs());
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        normwise_error: if max_fd > 0.0 {
            max_diff / max_fd
        } else {
            max_diff
        },
        entries: analytic.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixers::HeadDims;
    use crate::random::{gaussian_matrix, gaussian_vec, random_orthogonal, rng_for};

    fn tiny() -> HeadDims {
        HeadDims {
            model_dim: 6,
            key_dim: 4,
            value_dim: 4,
            num_heads: 2,
            conv_len: 3,
        }
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut rng = rng_for(3, 0);
        let p = LayerParams::init(&mut rng, &tiny()).unwrap();
        let x = gaussian_matrix(&mut rng, 4, 6);
        let loss = LossSpec::squared_error(gaussian_matrix(&mut rng, 4, 6));
        let (_, g) = layer_backward(&p, &x, Variant::Delta, &loss).unwrap();
        assert!(g.heads.iter().all(|h| h.w_alpha.max_abs() == 0.0));
        let (_, g) = layer_backward(&p, &x, Variant::Linear, &loss).unwrap();
        assert!(g
            .heads
            .iter()
            .all(|h| h.w_alpha.max_abs() == 0.0 && h.w_beta.max_abs() == 0.0));
    }

    #[test]
    fn output_projection_gradient_closed_form() {
        // Squared error on y = ŷ W_o gives ∂L/∂W_o = ŷᵀ (y − target) / T.
        let mut rng = rng_for(3, 1);
        let p = LayerParams::init(&mut rng, &tiny()).unwrap();
        let x = gaussian_matrix(&mut rng, 5, 6);
        let target = gaussian_matrix(&mut rng, 5, 6);
        let cache = forward_cached(&p, &x, Variant::Gated, false).unwrap();
        let resid = cache.y.sub(&target).unwrap().scale(1.0 / 5.0);
        let expect = matmul_tn(&cache.y_norm, &resid).unwrap();
        let (_, g) =
            layer_backward(&p, &x, Variant::Gated, &LossSpec::squared_error(target)).unwrap();
        assert!(g.w_o.sub(&expect).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn matches_finite_differences() {
        for variant in Variant::ALL {
            for seed in 0..3 {
                let mut rng = rng_for(seed, 7);
                let p = LayerParams::init(&mut rng, &tiny()).unwrap();
                let x = gaussian_matrix(&mut rng, 4, 6);
                let loss = LossSpec::squared_error(gaussian_matrix(&mut rng, 4, 6));
                let chk = finite_difference_check(&p, &x, variant, &loss, 1e-5, 1e-6).unwrap();
                assert!(
                    chk.max_rel_error <= 1e-5,
                    "{variant:?} seed {seed}: {chk:?}"
                );
            }
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = rng_for(9, 9);
        let p = LayerParams::init(&mut rng, &tiny()).unwrap();
        let x = gaussian_matrix(&mut rng, 4, 6);
        let mut target = Matrix::zeros(4, 6);
        target[(1, 2)] = 1.0;
        target[(3, 5)] = 1.0;
        let chk = finite_difference_check(
            &p,
            &x,
            Variant::Delta,
            &LossSpec::cross_entropy(target),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(chk.max_rel_error <= 1e-5, "{chk:?}");
    }

    #[test]
    fn gradients_are_bitwise_deterministic() {
        let mut rng = rng_for(4, 4);
        let p = LayerParams::init(&mut rng, &tiny()).unwrap();
        let x = gaussian_matrix(&mut rng, 6, 6);
        let loss = LossSpec::squared_error(gaussian_matrix(&mut rng, 6, 6));
        let a = layer_backward(&p, &x, Variant::Gated, &loss).unwrap();
        let b = layer_backward(&p, &x, Variant::Gated, &loss).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn query_jacobian_condition_cases() {
        assert!(
            (query_jacobian_condition(&Matrix::identity(3), &[1.0, 2.0]).unwrap() - 1.0).abs()
                < 1e-12
        );
        let k = query_jacobian_condition(&Matrix::diag(&[10.0, 1.0]), &[0.3, -1.0, 2.0]).unwrap();
        assert!((k - 10.0).abs() < 1e-10);
        let mut rng = rng_for(2, 2);
        for _ in 0..5 {
            let s = gaussian_matrix(&mut rng, 4, 5);
            let x = gaussian_vec(&mut rng, 3);
            let a = query_jacobian_condition(&s, &x).unwrap();
            let b = crate::linalg::condition_number(&s).unwrap();
            assert!((a - b).abs() <= 1e-8 * b);
        }
        assert_eq!(
            query_jacobian_condition(&Matrix::zeros(2, 2), &[1.0]),
            Err(Error::ZeroMatrix)
        );
        assert!(query_jacobian_condition(&Matrix::identity(2), &[0.0]).is_err());
        let _ = random_orthogonal(&mut rng, 2);
    }

    #[test]
    fn sgd_basics() {
        let mut rng = rng_for(0, 0);
        let mut p = LayerParams::init(&mut rng, &tiny()).unwrap();
        let before = p.clone();
        let zero = p.zeros_like();
        sgd_step(&mut p, &zero, 1.0);
        assert_eq!(p, before);
        let mut g = p.zeros_like();
        g.w_o[(0, 0)] = 0.25;
        sgd_step(&mut p, &g, 1.0);
        assert_eq!(p.w_o.get(0, 0), before.w_o.get(0, 0) - 0.25);
    }

    struct Bowl(Vec<Matrix>);
    impl ParamSet for Bowl {
        fn tensors(&self) -> Vec<&Matrix> {
            self.0.iter().collect()
        }
        fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
            self.0.iter_mut().collect()
        }
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        // L = ½ Σ c_i (θ_i − θ*_i)²
        let target = [1.0, -2.0, 0.5, 3.0];
        let curv = [1.0, 4.0, 0.5, 2.0];
        let mut p = Bowl(vec![Matrix::zeros(1, 4)]);
        let mut state = AdamState::new(
            &p,
            AdamHyper {
                lr: 0.05,
                ..AdamHyper::default()
            },
        );
        let loss = |p: &Bowl| -> f64 {
            (0..4)
                .map(|i| 0.5 * curv[i] * (p.0[0].get(0, i) - target[i]).powi(2))
                .sum()
        };
        let mut steps = 0;
        while loss(&p) >= 1e-6 && steps < 2000 {
            let g = Bowl(vec![Matrix::from_fn(1, 4, |_, i| {
                curv[i] * (p.0[0].get(0, i) - target[i])
            })]);
            adam_step(&mut p, &g, &mut state);
            steps += 1;
        }
        assert!(loss(&p) < 1e-6, "loss {} after {steps} steps", loss(&p));
    }
}
