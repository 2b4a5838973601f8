//! Independent test oracles. Everything here is deliberately implemented
//! with different algorithms than the library paths it checks: classical
//! two-sided Jacobi on the Gram matrix (vs one-sided Hestenes in the lib),
//! multiplicative-update Sinkhorn (vs the lib's log-domain tape), scalar
//! bisection on optimality conditions, and brute-force enumeration.

use cxit::numerics::{Matrix, Rng};

/// Singular values via a classical Jacobi eigen-solve of `mᵀm`, run to
/// machine precision. Returns them sorted descending.
pub fn jacobi_gram_singular_values(m: &Matrix) -> Vec<f64> {
    let k = m.cols();
    // Gram matrix.
    let mut g = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let mut acc = 0.0;
            for r in 0..m.rows() {
                acc += m[(r, i)] * m[(r, j)];
            }
            g[i][j] = acc;
        }
    }
    // Classical Jacobi: repeatedly zero the largest off-diagonal entry.
    for _ in 0..20_000 {
        let (mut p, mut q, mut biggest) = (0, 0, 0.0f64);
        for i in 0..k {
            for j in (i + 1)..k {
                if g[i][j].abs() > biggest {
                    biggest = g[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if biggest <= 1e-300 {
            break;
        }
        let scale: f64 = (0..k).map(|i| g[i][i].abs()).fold(0.0, f64::max);
        if biggest <= scale * 1e-15 {
            break;
        }
        let theta = 0.5 * (2.0 * g[p][q]).atan2(g[q][q] - g[p][p]);
        let (s, c) = theta.sin_cos();
        for i in 0..k {
            let gip = g[i][p];
            let giq = g[i][q];
            g[i][p] = c * gip - s * giq;
            g[i][q] = s * gip + c * giq;
        }
        for j in 0..k {
            let gpj = g[p][j];
            let gqj = g[q][j];
            g[p][j] = c * gpj - s * gqj;
            g[q][j] = s * gpj + c * gqj;
        }
    }
    let mut sv: Vec<f64> = (0..k).map(|i| g[i][i].max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Plain multiplicative-update Sinkhorn (`u, v` scalings on the kernel),
/// independent of the library's log-domain formulation. One iteration is a
/// row update followed by a column update; a final column scaling matches
/// the library's output convention.
pub fn plain_sinkhorn(
    cost: &Matrix,
    row_marg: &[f64],
    col_marg: &[f64],
    epsilon: f64,
    iters: usize,
) -> Matrix {
    let n = cost.rows();
    let k = cost.cols();
    let kernel = Matrix::from_fn(n, k, |i, j| (-cost[(i, j)] / epsilon).exp());
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; k];
    for _ in 0..iters {
        for i in 0..n {
            let denom: f64 = (0..k).map(|j| kernel[(i, j)] * v[j]).sum();
            u[i] = row_marg[i] / denom;
        }
        for j in 0..k {
            let denom: f64 = (0..n).map(|i| kernel[(i, j)] * u[i]).sum();
            v[j] = col_marg[j] / denom;
        }
    }
    let mut plan = Matrix::from_fn(n, k, |i, j| u[i] * kernel[(i, j)] * v[j]);
    let sums = plan.col_sums();
    for i in 0..n {
        for j in 0..k {
            plan[(i, j)] *= col_marg[j] / sums[j];
        }
    }
    plan
}

/// Solves the symmetric 2×2 entropic transport instance with uniform
/// marginals and cost [[0,1],[1,0]] by bisecting the scalar stationarity
/// condition of `f(a) = ⟨Π,C⟩ + ε Σ Π ln Π` over plans
/// [[a, ½−a], [½−a, a]]. Returns `a`.
pub fn bisect_2x2_entropic(epsilon: f64) -> f64 {
    // f'(a) = -2 + 2ε ln(a / (½ − a)); strictly increasing on (0, ½).
    let fprime = |a: f64| -2.0 + 2.0 * epsilon * (a / (0.5 - a)).ln();
    let mut lo = 1e-12;
    let mut hi = 0.5 - 1e-12;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fprime(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// All permutations of `0..k` by Heap's algorithm.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut items: Vec<usize> = (0..k).collect();
    let mut out = Vec::new();
    fn heap(items: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if n == 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..n {
            heap(items, n - 1, out);
            if n % 2 == 0 {
                items.swap(i, n - 1);
            } else {
                items.swap(0, n - 1);
            }
        }
    }
    heap(&mut items, k, &mut out);
    out
}

/// Brute-force assignment: the permutation minimizing Σ_i cost[i, π(i)],
/// with the best and second-best objective values.
pub fn brute_force_assignment(cost: &Matrix) -> (Vec<usize>, f64, f64) {
    assert_eq!(cost.rows(), cost.cols());
    let k = cost.rows();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut second = f64::INFINITY;
    for perm in permutations(k) {
        let value: f64 = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        match &best {
            Some((_, b)) if value >= *b => second = second.min(value),
            _ => {
                if let Some((_, b)) = &best {
                    second = second.min(*b);
                }
                best = Some((perm, value));
            }
        }
    }
    let (perm, value) = best.unwrap();
    (perm, value, second)
}

/// Random orthogonal matrix via Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal(rng: &mut Rng, n: usize) -> Matrix {
    loop {
        let raw = Matrix::from_fn(n, n, |_, _| rng.normal());
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..n).map(|i| raw[(i, j)]).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for prev in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[prev]).map(|(a, b)| a * b).sum();
                let prev_col = cols[prev].clone();
                for (x, p) in cols[j].iter_mut().zip(&prev_col) {
                    *x -= dot * p;
                }
            }
            let norm: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for x in &mut cols[j] {
                *x /= norm;
            }
        }
        if ok {
            return Matrix::from_fn(n, n, |i, j| cols[j][i]);
        }
    }
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!(
        (a - b).abs() <= tol,
        "{a} vs {b} differ by {} (tol {tol})",
        (a - b).abs()
    );
}
