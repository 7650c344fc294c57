//! A full mixer layer: projections, short convolutions, SiLU, l² normalized
//! queries and keys, the state recurrence, RMSNorm and the output projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::conv1d_causal;
use super::recurrence::{general_update, linear_step, Variant};
use super::{sigmoid, silu};
use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, Matrix};
use crate::random::gaussian_matrix;

/// Added under the square root when l²-normalizing queries and keys.
pub const QK_NORM_EPS: f64 = 1e-8;
pub const DEFAULT_RMS_EPS: f64 = 1e-6;
pub const DEFAULT_CONV_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HeadDims {
    pub model_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub num_heads: usize,
    pub conv_len: usize,
}

impl HeadDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("modelDim", self.model_dim),
            ("keyDim", self.key_dim),
            ("valueDim", self.value_dim),
            ("numHeads", self.num_heads),
            ("convLen", self.conv_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Weights of one head. Projections are stored `h × d` and applied as `x W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_beta: Matrix,
    pub w_alpha: Matrix,
    pub conv_q: Matrix,
    pub conv_k: Matrix,
    pub conv_v: Matrix,
}

impl HeadParams {
    pub const FIELDS: [&'static str; 8] = [
        "w_q", "w_k", "w_v", "w_beta", "w_alpha", "conv_q", "conv_k", "conv_v",
    ];

    pub fn key_dim(&self) -> usize {
        self.w_k.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.cols()
    }

    pub fn tensors(&self) -> [&Matrix; 8] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_beta,
            &self.w_alpha,
            &self.conv_q,
            &self.conv_k,
            &self.conv_v,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_beta,
            &mut self.w_alpha,
            &mut self.conv_q,
            &mut self.conv_k,
            &mut self.conv_v,
        ]
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            w_q: z(&self.w_q),
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            w_beta: z(&self.w_beta),
            w_alpha: z(&self.w_alpha),
            conv_q: z(&self.conv_q),
            conv_k: z(&self.conv_k),
            conv_v: z(&self.conv_v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// `(numHeads · d_v) × h`.
    pub w_o: Matrix,
    pub rms_eps: f64,
}

impl LayerParams {
    /// Random initialization: projections `N(0, 1/h)`, output projection
    /// `N(0, 1/(H d_v))`, conv filters near a unit first tap.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dims: &HeadDims) -> Result<Self> {
        dims.validate()?;
        let h = dims.model_dim;
        let proj = 1.0 / (h as f64).sqrt();
        let conv = |rng: &mut R, c: usize| {
            let mut f = gaussian_matrix(rng, c, dims.conv_len).scale(0.1);
            for i in 0..c {
                f[(i, 0)] += 1.0;
            }
            f
        };
        let heads = (0..dims.num_heads)
            .map(|_| HeadParams {
                w_q: gaussian_matrix(rng, h, dims.key_dim).scale(proj),
                w_k: gaussian_matrix(rng, h, dims.key_dim).scale(proj),
                w_v: gaussian_matrix(rng, h, dims.value_dim).scale(proj),
                w_beta: gaussian_matrix(rng, h, 1).scale(proj),
                w_alpha: gaussian_matrix(rng, h, 1).scale(proj),
                conv_q: conv(rng, dims.key_dim),
                conv_k: conv(rng, dims.key_dim),
                conv_v: conv(rng, dims.value_dim),
            })
            .collect();
        let cat = dims.num_heads * dims.value_dim;
        Ok(Self {
            heads,
            w_o: gaussian_matrix(rng, cat, h).scale(1.0 / (cat as f64).sqrt()),
            rms_eps: DEFAULT_RMS_EPS,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.w_o.cols()
    }

    /// Dimensions of head 0 (all heads share them unless pruned unevenly).
    pub fn dims(&self) -> HeadDims {
        let h0 = &self.heads[0];
        HeadDims {
            model_dim: self.model_dim(),
            key_dim: h0.key_dim(),
            value_dim: h0.value_dim(),
            num_heads: self.heads.len(),
            conv_len: h0.conv_k.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::InvalidArgument("layer has no heads".into()));
        }
        let h = self.model_dim();
        let mut cat = 0;
        for head in &self.heads {
            let d_k = head.key_dim();
            let d_v = head.value_dim();
            let l = head.conv_k.cols();
            let expect = [
                (&head.w_q, (h, d_k)),
                (&head.w_k, (h, d_k)),
                (&head.w_v, (h, d_v)),
                (&head.w_beta, (h, 1)),
                (&head.w_alpha, (h, 1)),
                (&head.conv_q, (d_k, l)),
                (&head.conv_k, (d_k, l)),
                (&head.conv_v, (d_v, l)),
            ];
            for (m, shape) in expect {
                if m.shape() != shape {
                    return Err(Error::DimensionMismatch {
                        op: "layer params",
                        left: m.shape(),
                        right: shape,
                    });
                }
            }
            if d_k == 0 || d_v == 0 || l == 0 {
                return Err(Error::InvalidArgument("empty head dimension".into()));
            }
            cat += d_v;
        }
        if self.w_o.rows() != cat {
            return Err(Error::DimensionMismatch {
                op: "output projection",
                left: self.w_o.shape(),
                right: (cat, h),
            });
        }
        if !(self.rms_eps > 0.0 && self.rms_eps.is_finite()) {
            return Err(Error::OutOfRange {
                what: "rmsEps",
                value: self.rms_eps,
            });
        }
        if !self.tensors().iter().all(|m| m.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    /// All weight tensors in a fixed order: per head the fields of
    /// [`HeadParams::FIELDS`], then `w_o`.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.heads.iter().flat_map(|h| h.tensors()).collect();
        out.push(&self.w_o);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .heads
            .iter_mut()
            .flat_map(|h| h.tensors_mut())
            .collect();
        out.push(&mut self.w_o);
        out
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads.iter().map(HeadParams::zeros_like).collect(),
            w_o: Matrix::zeros(self.w_o.rows(), self.w_o.cols()),
            rms_eps: self.rms_eps,
        }
    }
}

/// Per-head activations exposed for pruning statistics and diagnostics.
#[derive(Debug, Clone)]
pub struct HeadCapture {
    /// Post-conv, post-SiLU queries before l² normalization (`T × d_k`).
    pub q_act: Matrix,
    /// Post-conv, post-SiLU keys before l² normalization (`T × d_k`).
    pub k_act: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `S_1 … S_T` when requested.
    pub states: Option<Vec<Matrix>>,
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub y: Matrix,
    pub heads: Vec<HeadCapture>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct HeadCache {
    pub cq: Matrix,
    pub ck: Matrix,
    pub cv: Matrix,
    pub aq: Matrix,
    pub ak: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub q_norm: Vec<f64>,
    pub k_norm: Vec<f64>,
    pub zq: Matrix,
    pub zk: Matrix,
    pub zv: Matrix,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `S_0 … S_T`.
    pub states: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub heads: Vec<HeadCache>,
    /// Concatenated head outputs before RMSNorm.
    pub o_cat: Matrix,
    pub rms: Vec<f64>,
    pub y_norm: Matrix,
    pub y: Matrix,
}

/// Runs the recurrence on already-normalized streams. Returns the outputs
/// `o_t = S_t q_t` and, when `keep_states`, the states `S_0 … S_T`.
pub fn mixer_core(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    beta: &[f64],
    alpha: &[f64],
    variant: Variant,
    keep_states: bool,
) -> Result<(Matrix, Vec<Matrix>)> {
    let t_len = q.rows();
    if k.shape() != q.shape() || v.rows() != t_len || beta.len() != t_len || alpha.len() != t_len {
        return Err(Error::DimensionMismatch {
            op: "mixer_core",
            left: q.shape(),
            right: v.shape(),
        });
    }
    let d_v = v.cols();
    let mut s = Matrix::zeros(d_v, k.cols());
    let mut states = Vec::new();
    if keep_states {
        states.reserve(t_len + 1);
        states.push(s.clone());
    }
    let mut out = Matrix::zeros(t_len, d_v);
    for t in 0..t_len {
        match variant {
            Variant::Linear => linear_step(&mut s, k.row(t), v.row(t)),
            Variant::Delta => general_update(&mut s, k.row(t), v.row(t), 1.0, beta[t], beta[t]),
            Variant::Gated => {
                general_update(&mut s, k.row(t), v.row(t), alpha[t], beta[t], beta[t])
            }
        }
        let qt = q.row(t);
        let orow = out.row_mut(t);
        for (i, o) in orow.iter_mut().enumerate() {
            *o = dot(s.row(i), qt);
        }
        if keep_states {
            states.push(s.clone());
        }
    }
    Ok((out, states))
}

fn l2_normalize_rows(a: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = a.clone();
    let mut norms = Vec::with_capacity(a.rows());
    for t in 0..a.rows() {
        let row = out.row_mut(t);
        let n = (dot(row, row) + QK_NORM_EPS).sqrt();
        for x in row.iter_mut() {
            *x /= n;
        }
        norms.push(n);
    }
    (out, norms)
}

fn map(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| f(m.get(i, j)))
}

fn gate(x: &Matrix, w: &Matrix) -> Vec<f64> {
    let col = w.col(0);
    (0..x.rows())
        .map(|t| sigmoid(dot(x.row(t), &col)))
        .collect()
}

pub(crate) fn forward_cached(
    params: &LayerParams,
    x: &Matrix,
    variant: Variant,
    keep_states: bool,
) -> Result<LayerCache> {
    if x.cols() != params.model_dim() || x.rows() == 0 {
        return Err(Error::DimensionMismatch {
            op: "layer_forward",
            left: x.shape(),
            right: params.w_o.shape(),
        });
    }
    let t_len = x.rows();
    let mut heads = Vec::with_capacity(params.heads.len());
    let cat: usize = params.heads.iter().map(|h| h.value_dim()).sum();
    let mut o_cat = Matrix::zeros(t_len, cat);
    let mut offset = 0;
    for hp in &params.heads {
        let zq = matmul(x, &hp.w_q)?;
        let zk = matmul(x, &hp.w_k)?;
        let zv = matmul(x, &hp.w_v)?;
        let cq = conv1d_causal(&zq, &hp.conv_q)?;
        let ck = conv1d_causal(&zk, &hp.conv_k)?;
        let cv = conv1d_causal(&zv, &hp.conv_v)?;
        let aq = map(&cq, silu);
        let ak = map(&ck, silu);
        let v = map(&cv, silu);
        let (q, q_norm) = l2_normalize_rows(&aq);
        let (k, k_norm) = l2_normalize_rows(&ak);
        let beta = gate(x, &hp.w_beta);
        let alpha = match variant {
            Variant::Gated => gate(x, &hp.w_alpha),
            _ => vec![1.0; t_len],
        };
        let (o, states) = mixer_core(&q, &k, &v, &beta, &alpha, variant, keep_states)?;
        let d_v = v.cols();
        for t in 0..t_len {
            o_cat.row_mut(t)[offset..offset + d_v].copy_from_slice(o.row(t));
        }
        offset += d_v;
        heads.push(HeadCache {
            cq,
            ck,
            cv,
            aq,
            ak,
            q,
            k,
            v,
            q_norm,
            k_norm,
            zq,
            zk,
            zv,
            beta,
            alpha,
            states,
        });
    }
    let mut y_norm = o_cat.clone();
    let mut rms = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let row = y_norm.row_mut(t);
        let r = (dot(row, row) / cat as f64 + params.rms_eps).sqrt();
        for v in row.iter_mut() {
            *v /= r;
        }
        rms.push(r);
    }
    let y = matmul(&y_norm, &params.w_o)?;
    Ok(LayerCache {
        heads,
        o_cat,
        rms,
        y_norm,
        y,
    })
}

/// Forward pass over one sequence `x` (`T × h`).
pub fn layer_forward(
    params: &LayerParams,
    x: &Matrix,
    variant: Variant,
    keep_states: bool,
) -> Result<LayerOutput> {
    let cache = forward_cached(params, x, variant, keep_states)?;
    let heads = cache
        .heads
        .into_iter()
        .map(|h| HeadCapture {
            q_act: h.aq,
            k_act: h.ak,
            q: h.q,
            k: h.k,
            v: h.v,
            beta: h.beta,
            alpha: h.alpha,
            states: keep_states.then(|| h.states.into_iter().skip(1).collect()),
        })
        .collect();
    Ok(LayerOutput { y: cache.y, heads })
}
