use kqprune_core::diagnostics::{effective_rank, effective_rank_from_values};
use kqprune_core::linalg::{
    householder_qr, matmul, matmul_nt, numeric_rank, qrcp, rho_for_selection, srrqr_select_traced,
    svd, svd_values, Matrix,
};
use kqprune_core::mixers::{
    conv1d_causal, flops_per_step, linear_attention_parallel, linear_attention_recurrent,
    mixer_core, Variant,
};
use kqprune_core::pruning::{adapt_conv_filters, retained_width, top_k};
use kqprune_core::random::{gaussian_matrix, random_orthogonal, rng_for};
use kqprune_core::tasks::{gen_example, RecallTaskSpec};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    gaussian_matrix(&mut rng_for(seed, 7), rows, cols)
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.sub(b).unwrap().max_abs() <= tol * (1.0 + b.max_abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transpose_is_involution(r in 1usize..7, c in 1usize..7, seed in any::<u64>()) {
        let m = matrix(r, c, seed);
        prop_assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn matmul_associates(a in 1usize..5, b in 1usize..5, c in 1usize..5, d in 1usize..5, seed in any::<u64>()) {
        let x = matrix(a, b, seed);
        let y = matrix(b, c, seed ^ 1);
        let z = matrix(c, d, seed ^ 2);
        let l = matmul(&matmul(&x, &y).unwrap(), &z).unwrap();
        let r = matmul(&x, &matmul(&y, &z).unwrap()).unwrap();
        prop_assert!(close(&l, &r, 1e-12));
    }

    #[test]
    fn qr_factorizations_reconstruct(r in 1usize..9, c in 1usize..9, seed in any::<u64>()) {
        let m = matrix(r, c, seed);
        let f = qrcp(&m);
        prop_assert!(f.reconstruction_error(&m) <= 1e-12);
        let diag: Vec<f64> = (0..r.min(c)).map(|i| f.r.get(i, i)).collect();
        for w in diag.windows(2) {
            prop_assert!(w[0] + 1e-12 * diag[0] >= w[1]);
        }
        let (q, rr) = householder_qr(&m);
        prop_assert!(close(&q.matmul(&rr).unwrap(), &m, 1e-12));
        let gram = q.transpose().matmul(&q).unwrap();
        prop_assert!(close(&gram, &Matrix::identity(q.cols()), 1e-12));
    }

    #[test]
    fn svd_reconstructs_sorted(r in 1usize..8, c in 1usize..8, seed in any::<u64>()) {
        let m = matrix(r, c, seed);
        let s = svd(&m);
        for w in s.sigma.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
        let us = matmul(&s.u, &Matrix::diag(&s.sigma)).unwrap();
        prop_assert!(close(&matmul_nt(&us, &s.v).unwrap(), &m, 1e-11));
        let fro: f64 = s.sigma.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((fro - m.frobenius_norm()).abs() <= 1e-11 * fro);
    }

    #[test]
    fn srrqr_contract(rows in 4usize..10, n in 3usize..10, k_frac in 0.1f64..0.9, seed in any::<u64>()) {
        let m = matrix(rows, n, seed);
        let k = ((k_frac * n as f64) as usize).clamp(1, n - 1).min(rows);
        prop_assume!(k < n);
        let f = 1.5;
        let out = srrqr_select_traced(&m, k, f).unwrap();
        prop_assert!(out.max_rho <= f * (1.0 + 1e-12));
        for s in &out.swaps {
            prop_assert!(s.abs_det_after >= s.abs_det_before);
        }
        let (rho, _) = rho_for_selection(&m, &out.selected, f).unwrap();
        prop_assert!(rho.max_abs() <= f * (1.0 + 1e-9));
        let sv = svd_values(&m);
        let sel = svd_values(&m.select_columns(&out.selected));
        let bound = sv[k - 1] / (1.0 + f * f * (k * (n - k)) as f64).sqrt();
        prop_assert!(sel[k - 1] >= bound * (1.0 - 1e-10));
    }

    #[test]
    fn effective_rank_bounds(r in 1usize..7, c in 1usize..7, rank in 1usize..7, seed in any::<u64>()) {
        let rank = rank.min(r).min(c);
        let m = matmul(&matrix(r, rank, seed), &matrix(rank, c, seed ^ 9)).unwrap();
        let er = effective_rank(&m).unwrap();
        let nr = numeric_rank(&m, 1e-10) as f64;
        prop_assert!(er >= 1.0 - 1e-12);
        prop_assert!(er <= nr + 1e-9);
        let er2 = effective_rank_from_values(&svd_values(&m.scale(3.5))).unwrap();
        prop_assert!((er - er2).abs() <= 1e-9 * er);
    }

    #[test]
    fn linear_recurrence_matches_parallel(t in 1usize..12, dk in 1usize..6, dv in 1usize..6, seed in any::<u64>()) {
        let q = matrix(t, dk, seed);
        let k = matrix(t, dk, seed ^ 3);
        let v = matrix(t, dv, seed ^ 5);
        let (o, _) = linear_attention_recurrent(&q, &k, &v).unwrap();
        let p = linear_attention_parallel(&q, &k, &v).unwrap();
        prop_assert!(close(&o, &p, 1e-12));
    }

    #[test]
    fn rotation_invariance_of_mixer(t in 1usize..10, dk in 1usize..6, dv in 1usize..5, seed in any::<u64>()) {
        let mut rng = rng_for(seed, 1);
        let q = gaussian_matrix(&mut rng, t, dk);
        let k = gaussian_matrix(&mut rng, t, dk).scale(0.3);
        let v = gaussian_matrix(&mut rng, t, dv);
        let beta: Vec<f64> = (0..t).map(|i| 0.2 + 0.05 * i as f64 % 0.8).collect();
        let alpha: Vec<f64> = (0..t).map(|i| 0.5 + 0.04 * i as f64 % 0.5).collect();
        let rot = random_orthogonal(&mut rng, dk);
        for variant in Variant::ALL {
            let (a, _) = mixer_core(&q, &k, &v, &beta, &alpha, variant, false).unwrap();
            let (b, _) = mixer_core(&matmul_nt(&q, &rot).unwrap(), &matmul_nt(&k, &rot).unwrap(), &v, &beta, &alpha, variant, false).unwrap();
            prop_assert!(close(&a, &b, 1e-10));
        }
    }

    #[test]
    fn conv_commutes_with_channel_selection(t in 1usize..12, d in 1usize..8, l in 1usize..5, seed in any::<u64>()) {
        let x = matrix(t, d, seed);
        let w = matrix(d, l, seed ^ 11);
        let keep: Vec<usize> = (0..d).filter(|i| (seed >> (i % 60)) & 1 == 1).collect();
        prop_assume!(!keep.is_empty());
        let lhs = conv1d_causal(&x, &w).unwrap().select_columns(&keep);
        let rhs = conv1d_causal(&x.select_columns(&keep), &w.select_rows(&keep)).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-14);
    }

    #[test]
    fn conv_adaptation_is_gram_diagonal(d in 1usize..7, l in 1usize..5, keep in 1usize..7, seed in any::<u64>()) {
        let keep = keep.min(d);
        let t = random_orthogonal(&mut rng_for(seed, 2), d).select_rows(&(0..keep).collect::<Vec<_>>());
        let w = matrix(d, l, seed);
        let adapted = adapt_conv_filters(&t, &w).unwrap();
        for j in 0..l {
            let m = matmul(&matmul(&t, &Matrix::diag(&w.col(j))).unwrap(), &t.transpose()).unwrap();
            for kk in 0..keep {
                prop_assert!((adapted.get(kk, j) - m.get(kk, kk)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn retained_width_in_range(d_k in 1usize..64, ratio in 0.0f64..0.999) {
        let k = retained_width(d_k, ratio).unwrap();
        prop_assert!(k >= 1 && k <= d_k);
        prop_assert_eq!(retained_width(d_k, 0.0).unwrap(), d_k);
    }

    #[test]
    fn top_k_picks_largest(scores in proptest::collection::vec(-5.0f64..5.0, 1..20), k in 1usize..20) {
        let k = k.min(scores.len());
        let idx = top_k(&scores, k).unwrap();
        prop_assert_eq!(idx.len(), k);
        let min_kept = idx.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for (i, &s) in scores.iter().enumerate() {
            if !idx.contains(&i) {
                prop_assert!(s <= min_kept);
            }
        }
    }

    #[test]
    fn recall_sequences_are_collision_free(pairs in 1usize..6, extra in 1usize..10, vocab_extra in 0usize..10, seed in any::<u64>(), index in any::<u64>()) {
        let spec = RecallTaskSpec { vocab: 2 * pairs + vocab_extra, num_pairs: pairs, seq_len: 2 * pairs + extra, seed };
        let e = gen_example(&spec, index).unwrap();
        prop_assert_eq!(&e, &gen_example(&spec, index).unwrap());
        prop_assert_eq!(e.tokens.len(), spec.seq_len);
        prop_assert_eq!(*e.query_positions.last().unwrap(), spec.seq_len - 1);
        prop_assert_eq!(e.query_positions.len(), spec.probes_per_sequence());
        for (&pos, &target) in e.query_positions.iter().zip(&e.targets) {
            let key = e.tokens[pos];
            let hits: Vec<usize> = (0..pairs).filter(|&i| e.tokens[2 * i] == key).collect();
            prop_assert_eq!(hits.len(), 1);
            prop_assert_eq!(e.tokens[2 * hits[0] + 1], target);
        }
    }

    #[test]
    fn flops_halve_bilinear_part(dk in 1usize..64, dv in 1usize..64) {
        for variant in Variant::ALL {
            let half = flops_per_step(variant, 2 * dk, dv);
            let full = flops_per_step(variant, dk, dv);
            prop_assert_eq!(half.bilinear, 2 * full.bilinear);
            prop_assert_eq!(half.linear, full.linear);
        }
    }
}
