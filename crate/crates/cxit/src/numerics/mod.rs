//! Dense linear algebra, stable reductions, spectral utilities, seeded
//! randomness, and the finite-difference gradient oracle shared by the
//! rest of the crate.
//!
//! Everything here is plain `f64` with fixed evaluation order, so results
//! are bit-reproducible across runs.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::Rng;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("function evaluation failed at coordinate {coordinate}: produced {value}")]
    EvaluationFailure { coordinate: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Numerically stable softmax with temperature: `p_i ∝ exp(v_i / temperature)`.
///
/// Uses max-subtraction, so inputs may be arbitrarily large in magnitude.
pub fn softmax(values: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(NumericsError::InvalidArgument(
            "softmax of empty vector".into(),
        ));
    }
    if !(temperature > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// `log(sum_i exp(v_i))` with max-subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Singular values of `m`, sorted descending.
///
/// Computed by one-sided Jacobi orthogonalization of the columns (an
/// iterative eigen-solve of `mᵀm` in disguise), swept until every column
/// pair is orthogonal to relative residual 1e-12.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(NumericsError::InvalidArgument(
            "singular_values requires at least one row and column".into(),
        ));
    }
    if !m.is_finite() {
        return Err(NumericsError::InvalidArgument(
            "singular_values input contains non-finite entries".into(),
        ));
    }
    // Work on the tall orientation so we orthogonalize min(rows, cols) columns.
    let work = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let n = work.rows();
    let k = work.cols();
    // Column-major scratch for cache-friendly column ops.
    let mut col: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..n).map(|i| work[(i, j)]).collect())
        .collect();

    const TOL: f64 = 1e-12;
    const MAX_SWEEPS: usize = 64;
    for _ in 0..MAX_SWEEPS {
        let mut converged = true;
        for i in 0..k.saturating_sub(1) {
            for j in (i + 1)..k {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for t in 0..n {
                    alpha += col[i][t] * col[i][t];
                    beta += col[j][t] * col[j][t];
                    gamma += col[i][t] * col[j][t];
                }
                if gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..n {
                    let vi = col[i][r];
                    let vj = col[j][r];
                    col[i][r] = c * vi - s * vj;
                    col[j][r] = s * vi + c * vj;
                }
            }
        }
        if converged {
            break;
        }
    }

    let mut sv: Vec<f64> = col
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sv)
}

/// Effective rank: `exp(-Σ p_i ln p_i)` where `p` is the L1-normalized
/// singular-value spectrum. Lies in `[1, min(rows, cols)]`.
pub fn effective_rank(m: &Matrix) -> Result<f64> {
    let sv = singular_values(m)?;
    effective_rank_of_spectrum(&sv)
}

/// Effective rank of an already-computed nonnegative spectrum.
pub fn effective_rank_of_spectrum(sv: &[f64]) -> Result<f64> {
    let total: f64 = sv.iter().sum();
    if total <= 0.0 {
        return Err(NumericsError::DegenerateInput(
            "effective rank of an all-zero spectrum".into(),
        ));
    }
    let mut entropy = 0.0;
    for &s in sv {
        let p = s / total;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(entropy.exp())
}

/// Pairwise Pearson correlation between the rows of `m`.
#[derive(Debug, Clone)]
pub struct RowCorrelation {
    /// rows × rows correlation matrix; symmetric, diagonal 1 for
    /// non-degenerate rows.
    pub matrix: Matrix,
    /// Rows with exactly zero variance. Their correlations (including the
    /// diagonal) are reported as the sentinel 0 instead of NaN.
    pub zero_variance: Vec<bool>,
}

impl RowCorrelation {
    pub fn any_degenerate(&self) -> bool {
        self.zero_variance.iter().any(|&f| f)
    }
}

/// Pearson correlation between every pair of rows.
pub fn pearson_rows(m: &Matrix) -> Result<RowCorrelation> {
    if m.cols() < 2 {
        return Err(NumericsError::InvalidArgument(format!(
            "pearson_rows needs at least 2 columns, got {}",
            m.cols()
        )));
    }
    let n = m.rows();
    let cols = m.cols();
    let mut centered = Vec::with_capacity(n);
    let mut sq_norm = Vec::with_capacity(n);
    for r in 0..n {
        let row = m.row(r);
        let mean: f64 = row.iter().sum::<f64>() / cols as f64;
        let c: Vec<f64> = row.iter().map(|v| v - mean).collect();
        let ss: f64 = c.iter().map(|v| v * v).sum();
        centered.push(c);
        sq_norm.push(ss);
    }
    let zero_variance: Vec<bool> = sq_norm.iter().map(|&s| s == 0.0).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        if zero_variance[i] {
            continue;
        }
        out[(i, i)] = 1.0;
        for j in (i + 1)..n {
            if zero_variance[j] {
                continue;
            }
            let dot: f64 = centered[i]
                .iter()
                .zip(&centered[j])
                .map(|(a, b)| a * b)
                .sum();
            let corr = (dot / (sq_norm[i] * sq_norm[j]).sqrt()).clamp(-1.0, 1.0);
            out[(i, j)] = corr;
            out[(j, i)] = corr;
        }
    }
    Ok(RowCorrelation {
        matrix: out,
        zero_variance,
    })
}

/// Central-difference gradient of `f` at `x` with step `h`:
/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` per coordinate.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        let g = (plus - minus) / (2.0 * h);
        if !g.is_finite() {
            return Err(NumericsError::EvaluationFailure {
                coordinate: i,
                value: g,
            });
        }
        grad.push(g);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for v in &p {
            assert_close(*v, 1.0 / 3.0, 1e-15);
        }
        assert_close(p.iter().sum::<f64>(), 1.0, 1e-12);
    }

    #[test]
    fn softmax_single_element() {
        let p = softmax(&[5.2], 0.7).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn softmax_analytic_quarter_three_quarters() {
        let p = softmax(&[0.0, 3.0f64.ln()], 1.0).unwrap();
        assert_close(p[0], 0.25, 1e-14);
        assert_close(p[1], 0.75, 1e-14);
    }

    #[test]
    fn softmax_rejects_bad_arguments() {
        assert!(softmax(&[], 1.0).is_err());
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -2.0).is_err());
    }

    #[test]
    fn softmax_sharpens_at_low_temperature() {
        let p = softmax(&[0.3, 0.4, 0.2], 1e-3).unwrap();
        assert!(p[1] >= 0.999);
    }

    #[test]
    fn singular_values_identity() {
        let sv = singular_values(&Matrix::identity(3)).unwrap();
        for v in sv {
            assert_close(v, 1.0, 1e-12);
        }
    }

    #[test]
    fn singular_values_diagonal() {
        let m = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
        let sv = singular_values(&m).unwrap();
        assert_close(sv[0], 3.0, 1e-12);
        assert_close(sv[1], 1.0, 1e-12);
    }

    #[test]
    fn singular_values_rejects_non_finite() {
        let m = Matrix::from_rows(&[vec![1.0, f64::NAN]]);
        assert!(singular_values(&m).is_err());
    }

    #[test]
    fn singular_values_wide_matches_tall() {
        let mut rng = Rng::new(7);
        let m = Matrix::from_fn(3, 5, |_, _| rng.normal());
        let a = singular_values(&m).unwrap();
        let b = singular_values(&m.transpose()).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_close(*x, *y, 1e-10);
        }
    }

    #[test]
    fn effective_rank_identity_is_full() {
        assert_close(effective_rank(&Matrix::identity(3)).unwrap(), 3.0, 1e-12);
    }

    #[test]
    fn effective_rank_rank_one() {
        // Outer product of two vectors has a single nonzero singular value.
        let u = [1.0, 2.0, -0.5];
        let v = [0.3, -1.0, 2.0, 0.7];
        let m = Matrix::from_fn(3, 4, |i, j| u[i] * v[j]);
        assert_close(effective_rank(&m).unwrap(), 1.0, 1e-9);
    }

    #[test]
    fn effective_rank_diag_3_1() {
        let m = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
        let expected = (-0.75f64 * 0.75f64.ln() - 0.25 * 0.25f64.ln()).exp();
        assert_close(effective_rank(&m).unwrap(), expected, 1e-10);
        assert_close(expected, 1.7547, 1e-4);
    }

    #[test]
    fn effective_rank_rejects_zero_matrix() {
        assert!(matches!(
            effective_rank(&Matrix::zeros(2, 2)),
            Err(NumericsError::DegenerateInput(_))
        ));
    }

    #[test]
    fn pearson_identical_and_negated_rows() {
        let m = Matrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![1.0, 2.0, 3.0],
            vec![-1.0, -2.0, -3.0],
        ]);
        let c = pearson_rows(&m).unwrap();
        assert_close(c.matrix[(0, 1)], 1.0, 1e-12);
        assert_close(c.matrix[(0, 2)], -1.0, 1e-12);
        assert!(!c.any_degenerate());
    }

    #[test]
    fn pearson_orthogonal_zero_mean_rows() {
        // Both rows are zero-mean and their covariance is zero by construction.
        let m = Matrix::from_rows(&[vec![1.0, -1.0, 0.0], vec![1.0, 1.0, -2.0]]);
        let c = pearson_rows(&m).unwrap();
        assert_close(c.matrix[(0, 1)], 0.0, 1e-12);
    }

    #[test]
    fn pearson_flags_zero_variance_row() {
        let m = Matrix::from_rows(&[vec![2.0, 2.0, 2.0], vec![1.0, 2.0, 3.0]]);
        let c = pearson_rows(&m).unwrap();
        assert!(c.zero_variance[0]);
        assert!(!c.zero_variance[1]);
        assert_eq!(c.matrix[(0, 1)], 0.0);
        assert_eq!(c.matrix[(1, 0)], 0.0);
        assert_eq!(c.matrix[(0, 0)], 0.0);
        assert!(c.matrix.is_finite());
    }

    #[test]
    fn finite_diff_quadratic() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-4).unwrap();
        assert_close(g[0], 6.0, 1e-7);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let g = finite_diff_gradient(|_| 42.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn finite_diff_sin_sum() {
        let g = finite_diff_gradient(
            |x| x.iter().map(|v| v.sin()).sum(),
            &[0.0, std::f64::consts::FRAC_PI_2],
            1e-5,
        )
        .unwrap();
        assert_close(g[0], 1.0, 1e-8);
        assert_close(g[1], 0.0, 1e-8);
    }

    #[test]
    fn finite_diff_reports_failing_coordinate() {
        let err = finite_diff_gradient(
            |x| if x[1] > 0.5 { f64::NAN } else { 0.0 },
            &[0.0, 0.5],
            1e-3,
        )
        .unwrap_err();
        match err {
            NumericsError::EvaluationFailure { coordinate, .. } => assert_eq!(coordinate, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
