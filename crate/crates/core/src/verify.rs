//! Monte Carlo and constructed-case checks of the rank, conditioning and
//! invariance results the pruning method relies on.
//!
//! Each check draws trial `i` from its own stream `(seed, i)` and reports
//! the number of violations together with the worst relative slack
//! (`bound − value` over the bound scale; negative means violated).

use rand::Rng;
use serde::Serialize;

use crate::diagnostics::{amplification_ratio, effective_rank, rank_utilization, NoiseModel};
use crate::error::Result;
use crate::linalg::{
    condition_number, householder_qr, matmul, matmul_nt, matmul_tn, norm2, numeric_rank,
    svd_values, Matrix,
};
use crate::mixers::{
    conv1d_causal, general_update, layer_forward, mixer_core, HeadDims, LayerParams, Variant,
};
use crate::pruning::{pca_transform, HeadStats, SelectionMode};
use crate::random::{
    gaussian, gaussian_matrix, gaussian_vec, matrix_with_spectrum, random_orthogonal, rng_for,
    unit_vector, StreamRng,
};

/// Relative tolerance for deterministic inequalities.
pub const INEQ_TOL: f64 = 1e-9;
pub const RANK_TOL: f64 = 1e-10;
/// Draws with `γ` below this are rejected.
pub const GAMMA_MIN: f64 = 1e-3;
/// Draws with `‖S q*‖ < SIGNAL_MIN · ‖S‖₂` are rejected.
pub const SIGNAL_MIN: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    pub worst_slack: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckResult {
    fn from_tally(name: &str, tally: Tally) -> Self {
        Self {
            name: name.to_string(),
            trials: tally.trials,
            violations: tally.violations,
            worst_slack: tally.worst,
            passed: tally.violations == 0 && tally.trials > 0,
            note: None,
        }
    }

    fn with_note(mut self, note: String) -> Self {
        self.note = Some(note);
        self
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>7} {:>10} {:>14}  {}\n",
            "check", "trials", "violations", "worst slack", "status"
        );
        for c in &self.checks {
            out.push_str(&format!(
                "{:<28} {:>7} {:>10} {:>14.6e}  {}\n",
                c.name,
                c.trials,
                c.violations,
                c.worst_slack,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Trial budgets and an optional deliberately broken bound (used to
/// exercise the failure path).
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub rank_bound_trials: usize,
    pub sandwich_trials: usize,
    pub snr_trials: usize,
    pub snr_dims: Vec<usize>,
    pub expected_error_trials: usize,
    pub expected_error_draws: usize,
    pub er_trials: usize,
    pub stability_trials: usize,
    pub invariance_trials: usize,
    pub conv_trials: usize,
    pub pca_trials: usize,
    pub corrupt: Option<String>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            rank_bound_trials: 200,
            sandwich_trials: 500,
            snr_trials: 1000,
            snr_dims: vec![4, 8, 16],
            expected_error_trials: 20,
            expected_error_draws: 10_000,
            er_trials: 200,
            stability_trials: 100,
            invariance_trials: 50,
            conv_trials: 100,
            pca_trials: 200,
            corrupt: None,
        }
    }
}

pub const CHECK_NAMES: [&str; 10] = [
    "rank_bound",
    "sandwich",
    "amplification_bounds",
    "kappa_bounds",
    "expected_error",
    "er_properties",
    "stability",
    "orthogonal_invariance",
    "conv_slice_commutation",
    "pca_monotonicity",
];

#[derive(Debug, Clone, Copy)]
struct Tally {
    trials: usize,
    violations: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Self {
            trials: 0,
            violations: 0,
            worst: f64::INFINITY,
        }
    }

    /// Records `value ≤ bound` with relative tolerance.
    fn le(&mut self, value: f64, bound: f64) -> bool {
        if bound == f64::INFINITY || value == f64::NEG_INFINITY {
            return true;
        }
        let scale = bound.abs().max(value.abs()).max(f64::MIN_POSITIVE);
        let slack = (bound - value) / scale;
        self.worst = self.worst.min(slack);
        let ok = slack >= -INEQ_TOL;
        if !ok {
            self.violations += 1;
        }
        ok
    }

    /// Records `|a − b| ≤ tol` as slack `tol − |a − b|`.
    fn close(&mut self, a: f64, b: f64, tol: f64) -> bool {
        let slack = tol - (a - b).abs();
        self.worst = self.worst.min(slack);
        let ok = slack >= 0.0;
        if !ok {
            self.violations += 1;
        }
        ok
    }
}

fn corruption(opts: &VerifyOptions, name: &str) -> f64 {
    if opts.corrupt.as_deref() == Some(name) {
        0.5
    } else {
        1.0
    }
}

fn uniform_open(rng: &mut StreamRng) -> f64 {
    // (0, 1]
    1.0 - rng.random::<f64>()
}

/// `rank S_t ≤ min(rank K_t, rank V_t) ≤ t` along the general recursion
/// `S_t = S_{t−1}(α I − β k kᵀ) + γ v kᵀ`.
pub fn verify_rank_bound(
    trials: usize,
    d_k: usize,
    d_v: usize,
    t_len: usize,
    seed: u64,
    squeeze: f64,
) -> CheckResult {
    let mut tally = Tally::new();
    for trial in 0..trials {
        let mut rng = rng_for(seed, trial as u64);
        // Streams confined to random subspaces so the ranks differ.
        let rk = rng.random_range(1..=d_k);
        let rv = rng.random_range(1..=d_v);
        let bk = gaussian_matrix(&mut rng, rk, d_k);
        let bv = gaussian_matrix(&mut rng, rv, d_v);
        let mut s = Matrix::zeros(d_v, d_k);
        let mut ks: Vec<Vec<f64>> = Vec::new();
        let mut vs: Vec<Vec<f64>> = Vec::new();
        for t in 1..=t_len {
            let k = bk.matvec_t(&gaussian_vec(&mut rng, rk)).expect("shape");
            let v = bv.matvec_t(&gaussian_vec(&mut rng, rv)).expect("shape");
            let (a, b, g) = (
                uniform_open(&mut rng),
                uniform_open(&mut rng),
                uniform_open(&mut rng),
            );
            general_update(&mut s, &k, &v, a, b, g);
            ks.push(k);
            vs.push(v);
            let kmat = Matrix::from_fn(t, d_k, |i, j| ks[i][j]);
            let vmat = Matrix::from_fn(t, d_v, |i, j| vs[i][j]);
            let r_s = numeric_rank(&s, RANK_TOL) as f64;
            let r_kv = numeric_rank(&kmat, RANK_TOL).min(numeric_rank(&vmat, RANK_TOL)) as f64;
            tally.trials += 1;
            tally.le(r_s, r_kv * squeeze);
            tally.le(r_kv, t as f64);
        }
    }
    CheckResult::from_tally("rank_bound", tally)
}

/// `ν(V) / κ²(K) ≤ er(VᵀK)` with `ν(V) = er(V∥)`, `V∥` the projection of
/// the columns of `V` onto `col(K)`.
pub fn verify_sandwich(
    trials: usize,
    t_len: usize,
    d_k: usize,
    d_v: usize,
    seed: u64,
    squeeze: f64,
) -> CheckResult {
    let mut tally = Tally::new();
    let mut resampled = 0usize;
    for trial in 0..trials {
        let mut rng = rng_for(seed, trial as u64);
        loop {
            let spread = 10f64.powf(rng.random_range(0.0..3.0));
            let sigma: Vec<f64> = (0..d_k)
                .map(|i| spread.powf(-(i as f64) / (d_k as f64 - 1.0).max(1.0)))
                .collect();
            let k = matrix_with_spectrum(&mut rng, t_len, d_k, &sigma);
            let kappa = match condition_number(&k) {
                Ok(c) if c.is_finite() && c < 1e12 => c,
                _ => {
                    resampled += 1;
                    continue;
                }
            };
            let v = gaussian_matrix(&mut rng, t_len, d_v);
            let (q, _) = householder_qr(&k);
            let v_par = matmul(&q, &matmul_tn(&q, &v).expect("shape")).expect("shape");
            let s = matmul_tn(&v, &k).expect("shape");
            let (Ok(nu), Ok(er)) = (effective_rank(&v_par), effective_rank(&s)) else {
                resampled += 1;
                continue;
            };
            tally.trials += 1;
            tally.le(nu / (kappa * kappa), er * squeeze);
            break;
        }
    }
    CheckResult::from_tally("sandwich", tally)
        .with_note(format!("{resampled} degenerate draws resampled"))
}

/// One accepted `(S, q*, n)` draw.
struct SnrDraw {
    r: f64,
    delta: f64,
    gamma: f64,
    er: f64,
    kappa: f64,
}

fn snr_draw(rng: &mut StreamRng, d: usize) -> Option<SnrDraw> {
    // Spectrum shapes range from isotropic to sharply decaying and
    // rank deficient.
    let rank = rng.random_range(1..=d);
    let decay = rng.random_range(0.0..4.0);
    let sigma: Vec<f64> = (0..rank)
        .map(|i| (-decay * i as f64 / d as f64).exp() * (1.0 + 0.1 * gaussian(rng).abs()))
        .collect();
    let mut sigma = sigma;
    sigma.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let s = matrix_with_spectrum(rng, d, d, &sigma);
    let q = gaussian_vec(rng, d);
    let n = gaussian_vec(rng, d);
    let s2 = sigma[0];
    let sq = norm2(&s.matvec(&q).ok()?);
    if sq < SIGNAL_MIN * s2 {
        return None;
    }
    let a = amplification_ratio(&s, &q, &n).ok()?;
    if a.gamma < GAMMA_MIN {
        return None;
    }
    Some(SnrDraw {
        r: a.r,
        delta: a.delta,
        gamma: a.gamma,
        er: a.effective_rank,
        kappa: a.kappa,
    })
}

fn snr_draws(trials: usize, dims: &[usize], seed: u64) -> (Vec<SnrDraw>, usize) {
    let mut out = Vec::with_capacity(trials * dims.len());
    let mut rejected = 0;
    for (di, &d) in dims.iter().enumerate() {
        for trial in 0..trials {
            let mut rng = rng_for(seed, (di * trials + trial) as u64);
            loop {
                match snr_draw(&mut rng, d) {
                    Some(draw) => {
                        out.push(draw);
                        break;
                    }
                    None => rejected += 1,
                }
            }
        }
    }
    (out, rejected)
}

/// `δ/√er ≤ R ≤ √er/γ` on every draw.
pub fn verify_amplification_bounds(
    trials: usize,
    dims: &[usize],
    seed: u64,
    squeeze: f64,
) -> CheckResult {
    let (draws, rejected) = snr_draws(trials, dims, seed);
    let mut tally = Tally::new();
    for d in &draws {
        tally.trials += 1;
        let er = d.er.sqrt();
        let lo_ok = tally.le(d.delta / er, d.r);
        let hi_ok = tally.le(d.r, squeeze * er / d.gamma);
        if !lo_ok && !hi_ok {
            tally.violations -= 1;
        }
    }
    CheckResult::from_tally("amplification_bounds", tally)
        .with_note(format!("{rejected} degenerate draws resampled"))
}

/// `1/κ ≤ R ≤ κ` on the same draws. Also counts how often the κ interval
/// is the narrower of the two (recorded only).
pub fn verify_kappa_bounds(trials: usize, dims: &[usize], seed: u64, squeeze: f64) -> CheckResult {
    let (draws, _) = snr_draws(trials, dims, seed);
    let mut tally = Tally::new();
    let mut kappa_tighter = 0usize;
    for d in &draws {
        tally.trials += 1;
        let lo_ok = tally.le(1.0 / d.kappa, d.r);
        let hi_ok = tally.le(d.r, squeeze * d.kappa);
        if !lo_ok && !hi_ok {
            tally.violations -= 1;
        }
        let er = d.er.sqrt();
        if d.kappa - 1.0 / d.kappa <= er / d.gamma - d.delta / er {
            kappa_tighter += 1;
        }
    }
    CheckResult::from_tally("kappa_bounds", tally).with_note(format!(
        "kappa interval narrower on {kappa_tighter} of {} draws",
        draws.len()
    ))
}

/// Monte Carlo mean of `‖S n‖/‖S q*‖` for `n ~ N(0, ξ² I)`, unit `q*`:
/// returns `(mean, standard error)`.
pub fn monte_carlo_relative_error(
    s: &Matrix,
    q_star: &[f64],
    xi: f64,
    draws: usize,
    rng: &mut StreamRng,
) -> (f64, f64) {
    let sq = norm2(&s.matvec(q_star).expect("shape"));
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let n: Vec<f64> = (0..s.cols()).map(|_| xi * gaussian(rng)).collect();
        let e = norm2(&s.matvec(&n).expect("shape")) / sq;
        sum += e;
        sum_sq += e * e;
    }
    let m = draws as f64;
    let mean = sum / m;
    let var = (sum_sq / m - mean * mean).max(0.0) * m / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Expected relative error lies in `[lower − 3 SE, upper + 3 SE]`.
pub fn verify_expected_error(
    trials: usize,
    d: usize,
    xi: f64,
    draws: usize,
    seed: u64,
    squeeze: f64,
) -> Result<CheckResult> {
    let noise = NoiseModel::new(xi, d)?;
    let mut tally = Tally::new();
    for trial in 0..trials {
        let mut rng = rng_for(seed, trial as u64);
        let (s, q, er, gamma) = loop {
            let sigma: Vec<f64> = {
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(1.0..3.0)).collect();
                v.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                v
            };
            let s = matrix_with_spectrum(&mut rng, d, d, &sigma);
            let q = unit_vector(&mut rng, d);
            let n = gaussian_vec(&mut rng, d);
            let a = amplification_ratio(&s, &q, &n)?;
            if a.gamma >= GAMMA_MIN {
                break (s, q, a.effective_rank, a.gamma);
            }
        };
        let (lower, upper) = noise.expected_error_bounds(er, gamma);
        let (mean, se) = monte_carlo_relative_error(&s, &q, xi, draws, &mut rng);
        tally.trials += 1;
        let lo_ok = tally.le(lower - 3.0 * se, mean);
        let hi_ok = tally.le(mean, squeeze * (upper + 3.0 * se));
        if !lo_ok && !hi_ok {
            tally.violations -= 1;
        }
    }
    Ok(CheckResult::from_tally("expected_error", tally))
}

/// Transposition and orthogonal invariance, `1 ≤ er ≤ rank ≤ min(m, n)`,
/// `κ² ≥ rank/er`, and `er = rank` for equal non-zero singular values.
pub fn verify_er_properties(trials: usize, seed: u64, squeeze: f64) -> CheckResult {
    let mut tally = Tally::new();
    for trial in 0..trials {
        let mut rng = rng_for(seed, trial as u64);
        let m = rng.random_range(2..=7);
        let n = rng.random_range(2..=7);
        let r = rng.random_range(1..=m.min(n));
        let a = matmul(
            &gaussian_matrix(&mut rng, m, r),
            &gaussian_matrix(&mut rng, r, n),
        )
        .expect("shape");
        let er = effective_rank(&a).expect("nonzero");
        let rank = numeric_rank(&a, RANK_TOL) as f64;
        tally.trials += 1;
        tally.close(
            effective_rank(&a.transpose()).expect("nonzero"),
            er,
            1e-9 * er,
        );
        let u = random_orthogonal(&mut rng, m);
        let v = random_orthogonal(&mut rng, n);
        let c = 0.1 + 5.0 * rng.random::<f64>();
        let rotated = matmul(&matmul(&u, &a).expect("shape"), &v.transpose())
            .expect("shape")
            .scale(c);
        tally.close(effective_rank(&rotated).expect("nonzero"), er, 1e-9 * er);
        tally.le(1.0, er);
        tally.le(er, squeeze * rank);
        tally.le(rank, m.min(n) as f64);
        // κ over the non-zero spectrum.
        let sv = svd_values(&a);
        let kappa = sv[0] / sv[rank as usize - 1];
        tally.le(rank / er, kappa * kappa);
        // Equal non-zero singular values attain the upper bound.
        let flat = matrix_with_spectrum(&mut rng, m, n, &vec![c; r]);
        tally.close(effective_rank(&flat).expect("nonzero"), r as f64, 1e-9);
    }
    CheckResult::from_tally("er_properties", tally)
}

/// Eigenvalues of `I − β k kᵀ` for unit `k`: `1 − β` along `k` and 1 on
/// its complement, hence spectral radius at most 1.
pub fn verify_stability(trials: usize, d: usize, seed: u64, squeeze: f64) -> CheckResult {
    let mut tally = Tally::new();
    for trial in 0..trials {
        let mut rng = rng_for(seed, trial as u64);
        let k = unit_vector(&mut rng, d);
        let beta = match trial {
            0 => 1.0,
            1 => 0.5,
            _ => uniform_open(&mut rng),
        };
        let a = Matrix::identity(d)
            .sub(&Matrix::outer(&k, &k).scale(beta))
            .expect("shape");
        // Symmetric with non-negative spectrum: singular values are the eigenvalues.
        let ev = svd_values(&a);
        tally.trials += 1;
        tally.le(ev[0], squeeze);
        tally.close(ev[d - 1], 1.0 - beta, 1e-12);
        for &e in &ev[..d - 1] {
            tally.close(e, 1.0, 1e-12);
        }
        let ak = a.matvec(&k).expect("shape");
        let resid: f64 = ak
            .iter()
            .zip(&k)
            .map(|(x, y)| (x - (1.0 - beta) * y).powi(2))
            .sum::<f64>()
            .sqrt();
        tally.close(resid, 0.0, 1e-12);
    }
    CheckResult::from_tally("stability", tally)
}

/// Rotating queries and keys jointly by an orthogonal `T` leaves every
/// variant's mixer output unchanged.
pub fn verify_orthogonal_invariance(trials: usize, seed: u64, squeeze: f64) -> CheckResult {
    let mut tally = Tally::new();
    let dims = HeadDims {
        model_dim: 8,
        key_dim: 6,
        value_dim: 5,
        num_heads: 1,
        conv_len: 3,
    };
    for trial in 0..trials {
        let mut rng = rng_for(seed, trial as u64);
        let params = LayerParams::init(&mut rng, &dims).expect("valid dims");
        let x = gaussian_matrix(&mut rng, 12, dims.model_dim);
        let t = if trial == 0 {
            Matrix::identity(dims.key_dim)
        } else {
            random_orthogonal(&mut rng, dims.key_dim)
        };
        for variant in Variant::ALL {
            let out = layer_forward(&params, &x, variant, false).expect("forward");
            let h = &out.heads[0];
            let (a, _) =
                mixer_core(&h.q, &h.k, &h.v, &h.beta, &h.alpha, variant, false).expect("core");
            let qt = matmul_nt(&h.q, &t).expect("shape");
            let kt = matmul_nt(&h.k, &t).expect("shape");
            let (b, _) =
                mixer_core(&qt, &kt, &h.v, &h.beta, &h.alpha, variant, false).expect("core");
            let rel = a.sub(&b).expect("shape").frobenius_norm() / a.frobenius_norm();
            tally.trials += 1;
            tally.close(rel, 0.0, 1e-10 * squeeze);
        }
    }
    CheckResult::from_tally("orthogonal_invariance", tally)
}

/// `Conv1D(X, W) Pᵀ = Conv1D(X Pᵀ, P W)` for axis-aligned `P`.
pub fn verify_conv_slice(trials: usize, seed: u64, squeeze: f64) -> CheckResult {
    let mut tally = Tally::new();
    for trial in 0..trials {
        let mut rng = rng_for(seed, trial as u64);
        let d = rng.random_range(2..=10);
        let keep = rng.random_range(1..=d);
        let mut idx = rand::seq::index::sample(&mut rng, d, keep).into_vec();
        idx.sort_unstable();
        let p = Matrix::identity(d).select_rows(&idx);
        let t_len = rng.random_range(1..=16);
        let l = rng.random_range(1..=5);
        let x = gaussian_matrix(&mut rng, t_len, d);
        let w = gaussian_matrix(&mut rng, d, l);
        let lhs = matmul_nt(&conv1d_causal(&x, &w).expect("shape"), &p).expect("shape");
        let rhs = conv1d_causal(
            &matmul_nt(&x, &p).expect("shape"),
            &matmul(&p, &w).expect("shape"),
        )
        .expect("shape");
        tally.trials += 1;
        tally.close(
            lhs.sub(&rhs).expect("shape").max_abs(),
            0.0,
            1e-14 * squeeze,
        );
    }
    CheckResult::from_tally("conv_slice_commutation", tally)
}

/// `u(K Tᵀ) ≥ u(K)` for the PCA projection `T` onto every width.
pub fn verify_pca_monotonicity(trials: usize, seed: u64, squeeze: f64) -> CheckResult {
    let mut tally = Tally::new();
    for trial in 0..trials {
        let mut rng = rng_for(seed, trial as u64);
        let d_k = rng.random_range(2..=8);
        let n = d_k + rng.random_range(0..=24);
        let scales: Vec<f64> = (0..d_k)
            .map(|_| 10f64.powf(rng.random_range(-2.0..1.0)))
            .collect();
        let k = matmul(&gaussian_matrix(&mut rng, n, d_k), &Matrix::diag(&scales)).expect("shape");
        let k = matmul(&k, &random_orthogonal(&mut rng, d_k)).expect("shape");
        let stats = HeadStats {
            captured_k: k.clone(),
            captured_q: k.clone(),
            input_column_norms: Vec::new(),
        };
        let base = rank_utilization(&k, d_k, n).expect("nonzero");
        for width in 1..=d_k {
            let tr = pca_transform(&stats, width, false, SelectionMode::Keys).expect("pca");
            let kp = matmul_nt(&k, &tr.t).expect("shape");
            let u = rank_utilization(&kp, width, n).expect("nonzero");
            tally.trials += 1;
            tally.le(base * squeeze.recip() - 1e-12, u);
        }
    }
    CheckResult::from_tally("pca_monotonicity", tally)
}

/// Runs every check.
pub fn run_all(opts: &VerifyOptions) -> Result<VerifyReport> {
    let s = opts.seed;
    let sq = |name: &str| corruption(opts, name);
    let checks = vec![
        verify_rank_bound(opts.rank_bound_trials, 6, 6, 10, s, sq("rank_bound")),
        verify_sandwich(opts.sandwich_trials, 12, 5, 4, s, sq("sandwich")),
        verify_amplification_bounds(
            opts.snr_trials,
            &opts.snr_dims,
            s,
            sq("amplification_bounds"),
        ),
        verify_kappa_bounds(opts.snr_trials, &opts.snr_dims, s, sq("kappa_bounds")),
        verify_expected_error(
            opts.expected_error_trials,
            4,
            0.1,
            opts.expected_error_draws,
            s,
            sq("expected_error"),
        )?,
        verify_er_properties(opts.er_trials, s, sq("er_properties")),
        verify_stability(opts.stability_trials, 6, s, sq("stability")),
        verify_orthogonal_invariance(opts.invariance_trials, s, sq("orthogonal_invariance")),
        verify_conv_slice(opts.conv_trials, s, sq("conv_slice_commutation")),
        verify_pca_monotonicity(opts.pca_trials, s, sq("pca_monotonicity")),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        seed: s,
        passed,
        checks,
    })
}
