//! Effective rank, rank utilization, per-token spectra and the noise
//! amplification ratio of a read-out `o = S q`.

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{condition_number, dot, norm2, svd, svd_values, Matrix};
use crate::mixers::{layer_forward, LayerParams, Variant};

/// Below this Frobenius norm a state counts as zero.
pub const ZERO_STATE_TOL: f64 = 1e-14;

/// `‖S‖_F² / ‖S‖₂²`.
pub fn effective_rank(s: &Matrix) -> Result<f64> {
    if s.frobenius_norm() < ZERO_STATE_TOL {
        return Err(Error::ZeroMatrix);
    }
    effective_rank_from_values(&svd_values(s))
}

pub fn effective_rank_from_values(sigma: &[f64]) -> Result<f64> {
    let s1 = sigma.first().copied().unwrap_or(0.0);
    if s1 == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    Ok(sigma.iter().map(|s| (s / s1) * (s / s1)).sum())
}

/// `er(S) / min(d_k, d_v)`.
pub fn rank_utilization(s: &Matrix, d_k: usize, d_v: usize) -> Result<f64> {
    Ok(effective_rank(s)? / d_k.min(d_v) as f64)
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenSpectrum {
    pub token: usize,
    pub singular_values: Vec<f64>,
    /// `None` for a zero state.
    pub utilization: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct HeadRank {
    pub head: usize,
    /// Singular values of every analysed state, pooled and sorted descending.
    pub singular_values: Vec<f64>,
    /// Mean effective rank over non-zero states.
    pub effective_rank: f64,
    pub utilization: f64,
    /// Condition number of the final state.
    pub kappa_s: f64,
    /// Condition number of the normalized keys.
    pub kappa_k: f64,
    pub tokens_skipped: usize,
    pub tokens: Vec<TokenSpectrum>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RankReport {
    pub skip: usize,
    pub heads: Vec<HeadRank>,
}

impl RankReport {
    /// Rows `head,token,sigma_index,sigma_value`.
    pub fn spectrum_csv(&self) -> String {
        let mut out = String::from("head,token,sigma_index,sigma_value\n");
        for h in &self.heads {
            for t in &h.tokens {
                for (i, s) in t.singular_values.iter().enumerate() {
                    out.push_str(&format!("{},{},{},{:e}\n", h.head, t.token, i, s));
                }
            }
        }
        out
    }

    /// Rows `head,token,utilization` for non-zero states.
    pub fn utilization_csv(&self) -> String {
        let mut out = String::from("head,token,utilization\n");
        for h in &self.heads {
            for t in &h.tokens {
                if let Some(u) = t.utilization {
                    out.push_str(&format!("{},{},{:e}\n", h.head, t.token, u));
                }
            }
        }
        out
    }
}

/// Runs the layer on `x` and analyses the states at token indices
/// `skip..T` (zero-based) for every head.
pub fn spectrum_over_tokens(
    params: &LayerParams,
    x: &Matrix,
    variant: Variant,
    skip: usize,
) -> Result<RankReport> {
    if skip >= x.rows() {
        return Err(Error::InvalidArgument(format!(
            "skip {skip} must be below sequence length {}",
            x.rows()
        )));
    }
    let out = layer_forward(params, x, variant, true)?;
    let mut heads = Vec::with_capacity(out.heads.len());
    for (hi, cap) in out.heads.iter().enumerate() {
        let states = cap.states.as_ref().expect("states requested");
        let (d_v, d_k) = states[0].shape();
        let cap_dim = d_k.min(d_v) as f64;
        let mut pooled = Vec::new();
        let mut tokens = Vec::new();
        let mut er_sum = 0.0;
        let mut counted = 0usize;
        let mut skipped = 0usize;
        for (t, s) in states.iter().enumerate().skip(skip) {
            let sv = svd_values(s);
            pooled.extend_from_slice(&sv);
            let utilization = if s.frobenius_norm() < ZERO_STATE_TOL {
                skipped += 1;
                None
            } else {
                let er = effective_rank_from_values(&sv)?;
                er_sum += er;
                counted += 1;
                Some(er / cap_dim)
            };
            tokens.push(TokenSpectrum {
                token: t,
                singular_values: sv,
                utilization,
            });
        }
        if counted == 0 {
            return Err(Error::EmptySpectrum);
        }
        pooled.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        let er = er_sum / counted as f64;
        let last = states.last().expect("T >= 1");
        heads.push(HeadRank {
            head: hi,
            singular_values: pooled,
            effective_rank: er,
            utilization: er / cap_dim,
            kappa_s: condition_number(last).unwrap_or(f64::INFINITY),
            kappa_k: condition_number(&cap.k).unwrap_or(f64::INFINITY),
            tokens_skipped: skipped,
            tokens,
        });
    }
    Ok(RankReport { skip, heads })
}

/// Ratio of relative output error to relative input noise for a read-out
/// `S q̃`, `q̃ = q* + n`, with the alignment coefficients of the noise and
/// the signal against the top right singular vector `w₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Amplification {
    pub r: f64,
    pub delta: f64,
    pub gamma: f64,
    pub effective_rank: f64,
    pub kappa: f64,
}

pub fn amplification_ratio(s: &Matrix, q_star: &[f64], n: &[f64]) -> Result<Amplification> {
    let nq = norm2(q_star);
    let nn = norm2(n);
    if nq == 0.0 || nn == 0.0 {
        return Err(Error::InvalidArgument("q* and n must be nonzero".into()));
    }
    if s.frobenius_norm() < ZERO_STATE_TOL {
        return Err(Error::ZeroMatrix);
    }
    let sq = norm2(&s.matvec(q_star)?);
    if sq == 0.0 {
        return Err(Error::Degenerate("S q* = 0".into()));
    }
    let sn = norm2(&s.matvec(n)?);
    let f = svd(s);
    let w1 = f.v.col(0);
    let er = effective_rank_from_values(&f.sigma)?;
    let kappa = crate::linalg::svd::condition_from_values(&f.sigma)?;
    Ok(Amplification {
        r: (sn / nn) * (nq / sq),
        delta: dot(n, &w1).abs() / nn,
        gamma: dot(q_star, &w1).abs() / nq,
        effective_rank: er,
        kappa,
    })
}

/// `√2 Γ((d+1)/2) / Γ(d/2)`, the mean norm of a standard Gaussian in `d`
/// dimensions.
pub fn mu_constant(d: usize) -> f64 {
    assert!(d >= 1, "dimension must be positive");
    let d = d as f64;
    std::f64::consts::SQRT_2 * (ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp()
}

/// Isotropic Gaussian query noise `n ~ N(0, ξ² I_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseModel {
    pub xi: f64,
    pub d: usize,
    pub mu: f64,
}

impl NoiseModel {
    pub fn new(xi: f64, d: usize) -> Result<Self> {
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::OutOfRange {
                what: "xi",
                value: xi,
            });
        }
        if d == 0 {
            return Err(Error::InvalidArgument(
                "noise dimension must be positive".into(),
            ));
        }
        Ok(Self {
            xi,
            d,
            mu: mu_constant(d),
        })
    }

    /// Expected relative read-out error is bracketed by
    /// `(√(2/(π er)) ξ, √er ξ μ / γ)` for unit `q*`.
    pub fn expected_error_bounds(&self, er: f64, gamma: f64) -> (f64, f64) {
        let lower = (2.0 / (std::f64::consts::PI * er)).sqrt() * self.xi;
        let upper = er.sqrt() / gamma * self.xi * self.mu;
        (lower, upper)
    }
}
