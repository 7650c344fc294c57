//! Structured key/query channel pruning.
//!
//! Axis-aligned strategies keep a subset `𝓘` of the `d_k` channels of each
//! head: the matching columns of `W_q`, `W_k` and rows of their conv filters
//! survive, so the depthwise convolution still acts channel by channel.
//! PCA strategies rotate instead and need adapted filters.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul_nt, srrqr_select, svd, Matrix};
use crate::mixers::conv::conv1d_causal;
use crate::mixers::{layer_forward, HeadParams, LayerParams, Variant};
use crate::random::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "rand")]
    Rand,
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "swanda")]
    Swanda,
    #[serde(rename = "grad")]
    Grad,
    #[serde(rename = "drrqr")]
    Drrqr,
    #[serde(rename = "pca")]
    Pca,
    #[serde(rename = "pca-adversarial")]
    PcaAdversarial,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Rand,
        Strategy::L1,
        Strategy::Swanda,
        Strategy::Grad,
        Strategy::Drrqr,
        Strategy::Pca,
        Strategy::PcaAdversarial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rand => "rand",
            Strategy::L1 => "l1",
            Strategy::Swanda => "swanda",
            Strategy::Grad => "grad",
            Strategy::Drrqr => "drrqr",
            Strategy::Pca => "pca",
            Strategy::PcaAdversarial => "pca-adversarial",
        }
    }

    /// PCA strategies produce rotations rather than index sets.
    pub fn is_axis_aligned(self) -> bool {
        !matches!(self, Strategy::Pca | Strategy::PcaAdversarial)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Joint,
    Keys,
    Queries,
}

impl SelectionMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::Joint => "joint",
            SelectionMode::Keys => "keys",
            SelectionMode::Queries => "queries",
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(SelectionMode::Joint),
            "keys" => Ok(SelectionMode::Keys),
            "queries" => Ok(SelectionMode::Queries),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadPlan {
    pub retained: Vec<usize>,
    pub strategy: Strategy,
    pub mode: SelectionMode,
}

impl HeadPlan {
    pub fn target_width(&self) -> usize {
        self.retained.len()
    }

    pub fn validate(&self, d_k: usize) -> Result<()> {
        if self.retained.is_empty() || self.retained.len() > d_k {
            return Err(Error::InvalidArgument(format!(
                "retained width {} outside 1..={d_k}",
                self.retained.len()
            )));
        }
        if self.retained.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "retained indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = self.retained.last() {
            if last >= d_k {
                return Err(Error::OutOfRange {
                    what: "channel index",
                    value: last as f64,
                });
            }
        }
        Ok(())
    }

    /// Row-selection matrix `P_𝓘` (`d_k′ × d_k`).
    pub fn projection(&self, d_k: usize) -> Matrix {
        let mut p = Matrix::zeros(self.retained.len(), d_k);
        for (r, &c) in self.retained.iter().enumerate() {
            p[(r, c)] = 1.0;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub heads: Vec<HeadPlan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub layers: Vec<LayerPlan>,
}

/// Channels kept when a fraction `ratio` of `d_k` is removed:
/// `d_k − round(ratio · d_k)`, at least one.
pub fn retained_width(d_k: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::OutOfRange {
            what: "ratio",
            value: ratio,
        });
    }
    let removed = (ratio * d_k as f64).round() as usize;
    Ok(d_k.saturating_sub(removed).max(1))
}

/// Where activations are captured for data-driven strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapturePoint {
    /// After conv and SiLU, before l² normalization.
    #[default]
    PreNorm,
    /// After l² normalization.
    PostNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HeadStats {
    pub captured_k: Matrix,
    pub captured_q: Matrix,
    /// `‖X[:, i]‖₂` of the layer input over all calibration tokens.
    pub input_column_norms: Vec<f64>,
}

impl HeadStats {
    /// `M` for the given mode; joint stacks keys above queries.
    pub fn activations(&self, mode: SelectionMode) -> Result<Matrix> {
        match mode {
            SelectionMode::Joint => self.captured_k.vstack(&self.captured_q),
            SelectionMode::Keys => Ok(self.captured_k.clone()),
            SelectionMode::Queries => Ok(self.captured_q.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CalibrationStats {
    pub heads: Vec<HeadStats>,
    pub max_samples: usize,
}

pub const DEFAULT_CALIBRATION_SAMPLES: usize = 512;

/// Runs the layer over each calibration sequence and keeps at most
/// `max_samples` token rows per head (a seeded uniform subsample, rows in
/// original order).
pub fn collect_layer_stats(
    params: &LayerParams,
    inputs: &[Matrix],
    variant: Variant,
    max_samples: usize,
    capture: CapturePoint,
    seed: u64,
) -> Result<CalibrationStats> {
    if inputs.is_empty() || max_samples == 0 {
        return Err(Error::InvalidArgument(
            "calibration needs at least one sequence and sample".into(),
        ));
    }
    let h = params.model_dim();
    let n_heads = params.heads.len();
    let mut ks: Vec<Vec<f64>> = vec![Vec::new(); n_heads];
    let mut qs: Vec<Vec<f64>> = vec![Vec::new(); n_heads];
    let mut sq_norms = vec![0.0; h];
    let mut rows = 0;
    for x in inputs {
        let out = layer_forward(params, x, variant, false)?;
        for (hi, cap) in out.heads.iter().enumerate() {
            let (k, q) = match capture {
                CapturePoint::PreNorm => (&cap.k_act, &cap.q_act),
                CapturePoint::PostNorm => (&cap.k, &cap.q),
            };
            ks[hi].extend_from_slice(k.data());
            qs[hi].extend_from_slice(q.data());
        }
        for t in 0..x.rows() {
            for (acc, v) in sq_norms.iter_mut().zip(x.row(t)) {
                *acc += v * v;
            }
        }
        rows += x.rows();
    }
    let keep: Vec<usize> = if rows > max_samples {
        let mut rng = rng_for(seed, 0);
        let mut idx = sample(&mut rng, rows, max_samples).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..rows).collect()
    };
    let norms: Vec<f64> = sq_norms.iter().map(|s| s.sqrt()).collect();
    let heads = (0..n_heads)
        .map(|hi| {
            let d_k = params.heads[hi].key_dim();
            let k = Matrix::new(rows, d_k, std::mem::take(&mut ks[hi]))?;
            let q = Matrix::new(rows, d_k, std::mem::take(&mut qs[hi]))?;
            Ok(HeadStats {
                captured_k: k.select_rows(&keep),
                captured_q: q.select_rows(&keep),
                input_column_norms: norms.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationStats { heads, max_samples })
}

fn check_cols(w_q: &Matrix, w_k: &Matrix) -> Result<()> {
    if w_q.shape() != w_k.shape() {
        return Err(Error::DimensionMismatch {
            op: "channel scores",
            left: w_q.shape(),
            right: w_k.shape(),
        });
    }
    Ok(())
}

fn weighted_column_sums(
    w_q: &Matrix,
    w_k: &Matrix,
    mode: SelectionMode,
    weight: impl Fn(usize, usize, f64, bool) -> f64,
) -> Result<Vec<f64>> {
    check_cols(w_q, w_k)?;
    let (rows, cols) = w_q.shape();
    let use_q = mode != SelectionMode::Keys;
    let use_k = mode != SelectionMode::Queries;
    let mut s = vec![0.0; cols];
    for i in 0..rows {
        for (j, acc) in s.iter_mut().enumerate() {
            if use_q {
                *acc += weight(i, j, w_q.get(i, j), true);
            }
            if use_k {
                *acc += weight(i, j, w_k.get(i, j), false);
            }
        }
    }
    Ok(s)
}

/// `s_j = ‖W_q[:, j]‖₁ + ‖W_k[:, j]‖₁`, one term dropped outside joint mode.
pub fn score_l1(w_q: &Matrix, w_k: &Matrix, mode: SelectionMode) -> Result<Vec<f64>> {
    weighted_column_sums(w_q, w_k, mode, |_, _, w, _| w.abs())
}

/// `s_j = Σ_i (|W_q[i, j]| + |W_k[i, j]|) · ‖X[:, i]‖₂`.
pub fn score_swanda(
    w_q: &Matrix,
    w_k: &Matrix,
    input_norms: &[f64],
    mode: SelectionMode,
) -> Result<Vec<f64>> {
    if input_norms.len() != w_q.rows() {
        return Err(Error::DimensionMismatch {
            op: "score_swanda",
            left: w_q.shape(),
            right: (input_norms.len(), 1),
        });
    }
    weighted_column_sums(w_q, w_k, mode, |i, _, w, _| w.abs() * input_norms[i])
}

/// `s_j = Σ_i |W_q[i, j] ∇_q[i, j]| + |W_k[i, j] ∇_k[i, j]|`.
pub fn score_grad(
    w_q: &Matrix,
    w_k: &Matrix,
    g_q: &Matrix,
    g_k: &Matrix,
    mode: SelectionMode,
) -> Result<Vec<f64>> {
    check_cols(w_q, g_q)?;
    check_cols(w_k, g_k)?;
    if !g_q.is_finite() || !g_k.is_finite() {
        return Err(Error::NonFinite);
    }
    weighted_column_sums(w_q, w_k, mode, |i, j, w, is_q| {
        let g = if is_q { g_q.get(i, j) } else { g_k.get(i, j) };
        (w * g).abs()
    })
}

/// Indices of the `k` largest scores, ties to the lowest index, returned
/// in increasing order.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {k} of {} channels",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite")
            .then(a.cmp(&b))
    });
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Uniform `k`-subset of `0..d_k` from stream `(seed, stream)`.
pub fn select_rand(d_k: usize, k: usize, seed: u64, stream: u64) -> Result<Vec<usize>> {
    if k == 0 || k > d_k {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {k} of {d_k} channels"
        )));
    }
    let mut rng = rng_for(seed, stream);
    let mut idx = sample(&mut rng, d_k, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Strong-RRQR column selection on the captured activations.
pub fn select_drrqr(
    stats: &HeadStats,
    k: usize,
    f: f64,
    mode: SelectionMode,
) -> Result<Vec<usize>> {
    let m = stats.activations(mode)?;
    let d_k = m.cols();
    if k == 0 || k > d_k {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {k} of {d_k} channels"
        )));
    }
    if k == d_k {
        return Ok((0..d_k).collect());
    }
    let mut sel = srrqr_select(&m, k, f)?;
    sel.sort_unstable();
    Ok(sel)
}

/// Everything a strategy may need for one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadInputs<'a> {
    pub params: &'a HeadParams,
    pub stats: Option<&'a HeadStats>,
    /// Gradients of the calibration loss with respect to this head's weights.
    pub grads: Option<&'a HeadParams>,
    pub seed: u64,
    /// Independent random stream for this head.
    pub stream: u64,
    pub f: f64,
}

/// Selects `k` channels of one head.
pub fn select(
    strategy: Strategy,
    mode: SelectionMode,
    k: usize,
    inputs: &HeadInputs<'_>,
) -> Result<HeadPlan> {
    let d_k = inputs.params.key_dim();
    if k == 0 || k > d_k {
        return Err(Error::InvalidArgument(format!(
            "target width {k} outside 1..={d_k}"
        )));
    }
    let need_stats = || {
        inputs.stats.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "strategy `{strategy}` needs calibration statistics"
            ))
        })
    };
    let retained = if k == d_k {
        (0..d_k).collect()
    } else {
        match strategy {
            Strategy::Rand => select_rand(d_k, k, inputs.seed, inputs.stream)?,
            Strategy::L1 => top_k(&score_l1(&inputs.params.w_q, &inputs.params.w_k, mode)?, k)?,
            Strategy::Swanda => {
                let st = need_stats()?;
                top_k(
                    &score_swanda(
                        &inputs.params.w_q,
                        &inputs.params.w_k,
                        &st.input_column_norms,
                        mode,
                    )?,
                    k,
                )?
            }
            Strategy::Grad => {
                let g = inputs.grads.ok_or_else(|| {
                    Error::InvalidArgument("strategy `grad` needs calibration gradients".into())
                })?;
                top_k(
                    &score_grad(&inputs.params.w_q, &inputs.params.w_k, &g.w_q, &g.w_k, mode)?,
                    k,
                )?
            }
            Strategy::Drrqr => select_drrqr(need_stats()?, k, inputs.f, mode)?,
            Strategy::Pca | Strategy::PcaAdversarial => {
                return Err(Error::InvalidArgument(format!(
                    "strategy `{strategy}` yields a rotation; use pca_transform"
                )))
            }
        }
    };
    Ok(HeadPlan {
        retained,
        strategy,
        mode,
    })
}

/// Slices the query/key projections and their conv filters of every head.
pub fn apply_plan(params: &LayerParams, plan: &LayerPlan) -> Result<LayerParams> {
    if plan.heads.len() != params.heads.len() {
        return Err(Error::InvalidArgument(format!(
            "plan has {} heads, layer has {}",
            plan.heads.len(),
            params.heads.len()
        )));
    }
    let mut out = params.clone();
    for (hp, head) in out.heads.iter_mut().zip(&plan.heads) {
        head.validate(hp.key_dim())?;
        hp.w_q = hp.w_q.select_columns(&head.retained);
        hp.w_k = hp.w_k.select_columns(&head.retained);
        hp.conv_q = hp.conv_q.select_rows(&head.retained);
        hp.conv_k = hp.conv_k.select_rows(&head.retained);
    }
    Ok(out)
}

/// Orthonormal-row projection from the principal directions of the
/// captured activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PcaTransform {
    /// `d_k′ × d_k`.
    pub t: Matrix,
    pub adversarial: bool,
    /// Share of the empirical second moment along the kept directions.
    pub explained_variance: f64,
}

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const PCA_EIG_TOL: f64 = 1e-12;

/// Top (or, if `adversarial`, bottom) `k` eigenvectors of
/// `Σ̂ = MᵀM / N`, as rows.
pub fn pca_transform(
    stats: &HeadStats,
    k: usize,
    adversarial: bool,
    mode: SelectionMode,
) -> Result<PcaTransform> {
    let m = stats.activations(mode)?;
    let (n, d_k) = m.shape();
    if n < d_k {
        return Err(Error::InvalidData {
            expected: d_k,
            got: n,
        });
    }
    if k == 0 || k > d_k {
        return Err(Error::InvalidArgument(format!(
            "target width {k} outside 1..={d_k}"
        )));
    }
    let f = svd(&m);
    let eig: Vec<f64> = f.sigma.iter().map(|s| s * s / n as f64).collect();
    let top = eig[0];
    let eig: Vec<f64> = eig
        .iter()
        .map(|&e| if e < PCA_EIG_TOL * top { 0.0 } else { e })
        .collect();
    let chosen: Vec<usize> = if adversarial {
        (d_k - k..d_k).rev().collect()
    } else {
        (0..k).collect()
    };
    let t = Matrix::from_fn(k, d_k, |r, c| f.v.get(c, chosen[r]));
    let total: f64 = eig.iter().sum();
    let kept: f64 = chosen.iter().map(|&i| eig[i]).sum();
    Ok(PcaTransform {
        t,
        adversarial,
        explained_variance: if total > 0.0 { kept / total } else { 0.0 },
    })
}

fn check_orthonormal_rows(t: &Matrix) -> Result<()> {
    let gram = matmul_nt(t, t)?;
    let residual = gram.sub(&Matrix::identity(t.rows()))?.max_abs();
    if residual > 1e-10 {
        return Err(Error::NotOrthogonal { residual });
    }
    Ok(())
}

/// Best diagonal filters in the rotated basis: `W′ = (T ⊙ T) W`.
/// `t` needs orthonormal rows; a square `t` must be orthogonal.
pub fn adapt_conv_filters(t: &Matrix, w: &Matrix) -> Result<Matrix> {
    check_orthonormal_rows(t)?;
    if t.cols() != w.rows() {
        return Err(Error::DimensionMismatch {
            op: "adapt_conv_filters",
            left: t.shape(),
            right: w.shape(),
        });
    }
    let t2 = t.hadamard(t)?;
    t2.matmul(w)
}

/// Rotates queries and keys of every head by its transform, adapting the
/// conv filters. Not hardware-aligned: the depthwise conv only
/// approximates the rotated dynamics.
pub fn apply_pca(params: &LayerParams, transforms: &[PcaTransform]) -> Result<LayerParams> {
    if transforms.len() != params.heads.len() {
        return Err(Error::InvalidArgument(
            "one transform per head required".into(),
        ));
    }
    let mut out = params.clone();
    for (hp, tr) in out.heads.iter_mut().zip(transforms) {
        hp.w_q = matmul_nt(&hp.w_q, &tr.t)?;
        hp.w_k = matmul_nt(&hp.w_k, &tr.t)?;
        hp.conv_q = adapt_conv_filters(&tr.t, &hp.conv_q)?;
        hp.conv_k = adapt_conv_filters(&tr.t, &hp.conv_k)?;
    }
    Ok(out)
}

/// Whether `W ∗ (T x) = T (W ∗ x)` holds within `1e-12` (relative to the
/// output scale) for the sequence `x` (`T_len × d`, rows are time steps).
pub fn shared_conv_commute_check(w: &Matrix, t: &Matrix, x: &Matrix) -> Result<bool> {
    let tx = matmul_nt(x, t)?;
    let lhs = conv1d_causal(&tx, w)?;
    let rhs = matmul_nt(&conv1d_causal(x, w)?, t)?;
    let scale = rhs.max_abs().max(1.0);
    Ok(lhs.sub(&rhs)?.max_abs() <= 1e-12 * scale)
}
