//! Dual-route checks: library results against the independent oracles in
//! `common` (different algorithms, different code paths).

mod common;

use common::*;
use cxit::numerics::{self, Matrix, Rng};
use cxit::width;

#[test]
fn singular_values_match_gram_jacobi_oracle() {
    let mut rng = Rng::new(101);
    for trial in 0..20 {
        let rows = 2 + (trial % 5);
        let cols = 2 + (trial % 4);
        let m = Matrix::from_fn(rows, cols, |_, _| rng.normal());
        let got = numerics::singular_values(&m).unwrap();
        let want = jacobi_gram_singular_values(&m);
        assert_eq!(got.len(), want.len().min(rows.min(cols)));
        for (g, w) in got.iter().zip(&want) {
            assert_close(*g, *w, 1e-8);
        }
    }
}

#[test]
fn singular_values_random_5x4_matches_oracle() {
    let mut rng = Rng::new(55);
    let m = Matrix::from_fn(5, 4, |_, _| rng.normal());
    let got = numerics::singular_values(&m).unwrap();
    let want = jacobi_gram_singular_values(&m);
    for (g, w) in got.iter().zip(&want) {
        assert_close(*g, *w, 1e-8);
    }
}

#[test]
fn singular_values_recover_planted_spectrum() {
    // Q·D·Pᵀ with orthogonal Q, P built by Gram–Schmidt has spectrum diag(D).
    let mut rng = Rng::new(77);
    for n in [3usize, 5, 7] {
        let q = random_orthogonal(&mut rng, n);
        let p = random_orthogonal(&mut rng, n);
        let d: Vec<f64> = (0..n).map(|_| rng.uniform() * 5.0).collect();
        let dm = Matrix::from_fn(n, n, |i, j| if i == j { d[i] } else { 0.0 });
        let m = q.matmul(&dm).matmul(&p.transpose());
        let got = numerics::singular_values(&m).unwrap();
        let mut want = d.clone();
        want.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (g, w) in got.iter().zip(&want) {
            assert_close(*g, *w, 1e-8);
        }
    }
}

#[test]
fn effective_rank_against_direct_entropy_evaluation() {
    let m = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
    let got = numerics::effective_rank(&m).unwrap();
    // Direct high-precision evaluation of exp(-Σ p ln p) for p = (3/4, 1/4).
    let expected = (-(0.75f64.ln() * 0.75 + 0.25f64.ln() * 0.25)).exp();
    assert_close(got, expected, 1e-12);
}

#[test]
fn sinkhorn_matches_multiplicative_oracle() {
    let mut rng = Rng::new(202);
    for _ in 0..10 {
        let n = 6 + rng.below(6) as usize;
        let k = 2 + rng.below(3) as usize;
        let cost = Matrix::from_fn(n, k, |_, _| rng.uniform() * 2.0);
        let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 0.05).collect();
        let total: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let col = vec![1.0 / k as f64; k];
        let epsilon = 0.3;
        let iters = 60;
        let lib = width::sinkhorn_plan(&cost, &row, &col, epsilon, iters).unwrap();
        let oracle = plain_sinkhorn(&cost, &row, &col, epsilon, iters);
        for i in 0..n {
            for j in 0..k {
                assert_close(lib.plan[(i, j)], oracle[(i, j)], 1e-12);
            }
        }
    }
}

#[test]
fn two_by_two_entropic_instance_matches_both_oracles() {
    // Cost [[0,1],[1,0]], uniform marginals, ε = 0.5: the plan has the form
    // [[a, ½−a], [½−a, a]].
    let cost = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
    let marg = [0.5, 0.5];
    let lib = width::sinkhorn_plan(&cost, &marg, &marg, 0.5, 30).unwrap();

    let high_precision = plain_sinkhorn(&cost, &marg, &marg, 0.5, 10_000);
    let a_bisect = bisect_2x2_entropic(0.5);
    // Closed form for reference: a = ½·e²/(1+e²).
    let a_closed = 0.5 / (1.0 + (-2.0f64).exp());
    assert_close(a_bisect, a_closed, 1e-10);

    for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let expected = if i == j { a_bisect } else { 0.5 - a_bisect };
        assert_close(lib.plan[(i, j)], high_precision[(i, j)], 1e-6);
        assert_close(lib.plan[(i, j)], expected, 1e-6);
    }
}

#[test]
fn small_epsilon_recovers_brute_force_assignment() {
    let mut rng = Rng::new(303);
    for k in 2..=6 {
        // Draw until the optimal permutation is unique with a clear margin.
        let cost = loop {
            let c = Matrix::from_fn(k, k, |_, _| rng.uniform() * 2.0);
            let (_, best, second) = brute_force_assignment(&c);
            if second - best > 0.05 {
                break c;
            }
        };
        let (perm, _, _) = brute_force_assignment(&cost);
        let marg = vec![1.0 / k as f64; k];
        let plan = width::sinkhorn_plan(&cost, &marg, &marg, 1e-3, 20_000).unwrap();
        let on_perm: f64 = perm.iter().enumerate().map(|(i, &j)| plan.plan[(i, j)]).sum();
        assert!(
            on_perm >= 0.99,
            "k={k}: only {on_perm:.4} of the mass on the optimal assignment"
        );
    }
}
