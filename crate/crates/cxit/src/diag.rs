//! Allocation diagnostics: inter-slot correlation of the transmission plan,
//! its singular-value spectrum and effective rank, and depth-gate heatmaps,
//! exported as plot-ready CSV/JSON.

use crate::numerics::{self, Matrix};
use crate::width::TransmissionPlan;
use serde::Serialize;
use std::ops::Range;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, DiagError>;

/// Inter-slot Pearson correlation of the plan.
#[derive(Debug, Clone)]
pub struct PlanCorrelation {
    /// K×K correlation between the L1-normalized plan columns.
    pub matrix: Matrix,
    /// Slots whose plan column is all-zero; their correlations are the
    /// sentinel 0 instead of NaN.
    pub degenerate_slots: Vec<bool>,
}

/// Pearson correlation between the slots' aggregation distributions: each
/// plan column is L1-normalized and treated as a vector over the tokens.
pub fn plan_correlation(plan: &TransmissionPlan) -> Result<PlanCorrelation> {
    let k = plan.num_slots();
    if k < 2 {
        return Err(DiagError::InvalidArgument(format!(
            "correlation needs at least 2 slots, got {k}"
        )));
    }
    // Columns as rows, each normalized to sum 1 (zero columns flagged).
    let n = plan.num_tokens();
    let mut by_slot = Matrix::zeros(k, n);
    let col_sums = plan.plan.col_sums();
    for s in 0..k {
        if col_sums[s] == 0.0 {
            continue;
        }
        for t in 0..n {
            by_slot[(s, t)] = plan.plan[(t, s)] / col_sums[s];
        }
    }
    let corr = numerics::pearson_rows(&by_slot)?;
    let degenerate_slots: Vec<bool> = (0..k)
        .map(|s| col_sums[s] == 0.0 || corr.zero_variance[s])
        .collect();
    Ok(PlanCorrelation {
        matrix: corr.matrix,
        degenerate_slots,
    })
}

/// Mean |off-diagonal correlation| restricted to slot pairs that share a
/// segment.
pub fn mean_abs_offdiag_within_segments(
    corr: &Matrix,
    blocks: &[(Range<usize>, Range<usize>)],
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (_, slot_range) in blocks {
        for i in slot_range.clone() {
            for j in slot_range.clone() {
                if i != j {
                    total += corr[(i, j)].abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Normalized singular-value spectrum of the plan and its effective rank.
#[derive(Debug, Clone)]
pub struct PlanSpectrum {
    /// Singular values normalized to sum 1, descending.
    pub spectrum: Vec<f64>,
    pub erank: f64,
}

pub fn plan_spectrum(plan: &TransmissionPlan) -> Result<PlanSpectrum> {
    let sv = numerics::singular_values(&plan.plan)?;
    let total: f64 = sv.iter().sum();
    if total <= 0.0 {
        return Err(DiagError::DegenerateInput("all-zero plan".into()));
    }
    let erank = numerics::effective_rank_of_spectrum(&sv)?;
    Ok(PlanSpectrum {
        spectrum: sv.iter().map(|s| s / total).collect(),
        erank,
    })
}

/// Run provenance attached to every exported report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub version: String,
    pub seed: u64,
    /// SHA-256 of the resolved configuration document.
    pub config_sha256: String,
    pub config: serde_json::Value,
}

/// Everything the analysis instruments produce for one sequence.
#[derive(Debug, Clone)]
pub struct DiagReport {
    pub correlation: PlanCorrelation,
    pub spectrum: PlanSpectrum,
    /// N×L depth-gate heatmap (rows sum to 1).
    pub gate_heatmap: Matrix,
    pub meta: ReportMeta,
}

/// Formats one float the way every exporter here does: shortest f32-exact
/// decimal, so re-parsing reproduces the stored value bit-for-bit.
pub fn format_f32(v: f64) -> String {
    format!("{}", v as f32)
}

fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|&v| format_f32(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| DiagError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `correlation.csv`, `spectrum.csv`, `gates.csv`, and `meta.json`
/// into `dir` (created if absent).
pub fn export_report(report: &DiagReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| DiagError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write(
        &dir.join("correlation.csv"),
        matrix_to_csv(&report.correlation.matrix).as_bytes(),
    )?;
    let spectrum: String = report
        .spectrum
        .spectrum
        .iter()
        .map(|v| format_f32(*v) + "\n")
        .collect();
    write(&dir.join("spectrum.csv"), spectrum.as_bytes())?;
    write(
        &dir.join("gates.csv"),
        matrix_to_csv(&report.gate_heatmap).as_bytes(),
    )?;
    let meta = serde_json::to_string_pretty(&report.meta).expect("meta serialization");
    write(&dir.join("meta.json"), meta.as_bytes())?;
    Ok(())
}

/// Dense plan export: N rows × K columns CSV.
pub fn plan_to_csv(plan: &TransmissionPlan) -> String {
    matrix_to_csv(&plan.plan)
}

#[derive(Debug, Serialize)]
struct PlanBlockJson {
    token_range: [usize; 2],
    slot_range: [usize; 2],
    /// Row-major block values.
    values: Vec<f32>,
}

#[derive(Debug, Serialize)]
struct PlanJson {
    num_tokens: usize,
    num_slots: usize,
    blocks: Vec<PlanBlockJson>,
}

/// Sparse plan export: per-block value arrays.
pub fn plan_to_json(plan: &TransmissionPlan) -> String {
    let blocks = plan
        .blocks
        .iter()
        .map(|(tr, sr)| {
            let mut values = Vec::with_capacity(tr.len() * sr.len());
            for t in tr.clone() {
                for s in sr.clone() {
                    values.push(plan.plan[(t, s)] as f32);
                }
            }
            PlanBlockJson {
                token_range: [tr.start, tr.end],
                slot_range: [sr.start, sr.end],
                values,
            }
        })
        .collect();
    serde_json::to_string_pretty(&PlanJson {
        num_tokens: plan.num_tokens(),
        num_slots: plan.num_slots(),
        blocks,
    })
    .expect("plan serialization")
}

/// Aligned slot vectors as a K×d_dec CSV.
pub fn slots_to_csv(aligned: &Matrix) -> String {
    matrix_to_csv(aligned)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn plan_from_matrix(m: Matrix) -> TransmissionPlan {
        let blocks = vec![(0..m.rows(), 0..m.cols())];
        TransmissionPlan {
            sender_marginals: m.row_sums(),
            receiver_marginals: m.col_sums(),
            blocks,
            max_row_residual: 0.0,
            plan: m,
        }
    }

    #[test]
    fn identical_columns_correlate_fully() {
        let m = Matrix::from_fn(4, 2, |t, _| (t + 1) as f64 * 0.1);
        let corr = plan_correlation(&plan_from_matrix(m)).unwrap();
        assert_close(corr.matrix[(0, 1)], 1.0, 1e-12);
        assert!(!corr.degenerate_slots.iter().any(|&d| d));
    }

    #[test]
    fn outer_product_plan_correlates_fully() {
        // Constant-cost degenerate case: every column proportional to ρ.
        let rho = [0.1, 0.4, 0.2, 0.3];
        let m = Matrix::from_fn(4, 3, |t, _| rho[t] / 3.0);
        let corr = plan_correlation(&plan_from_matrix(m)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_close(corr.matrix[(i, j)], 1.0, 1e-12);
                }
            }
        }
    }

    #[test]
    fn disjoint_equal_support_columns_anticorrelate() {
        // Two slots splitting a 4-token segment evenly: r = -1 exactly when
        // both normalized columns are uniform over complementary halves.
        let mut m = Matrix::zeros(4, 2);
        m[(0, 0)] = 0.25;
        m[(1, 0)] = 0.25;
        m[(2, 1)] = 0.25;
        m[(3, 1)] = 0.25;
        let corr = plan_correlation(&plan_from_matrix(m.clone())).unwrap();

        // Oracle: direct Pearson on the explicitly normalized columns.
        let cols = Matrix::from_rows(&[
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.5],
        ]);
        let expected = numerics::pearson_rows(&cols).unwrap();
        assert_close(corr.matrix[(0, 1)], expected.matrix[(0, 1)], 1e-12);
        assert_close(corr.matrix[(0, 1)], -1.0, 1e-12);
    }

    #[test]
    fn zero_column_flagged_not_nan() {
        let mut m = Matrix::zeros(3, 2);
        m[(0, 0)] = 0.5;
        m[(1, 0)] = 0.5;
        let corr = plan_correlation(&plan_from_matrix(m)).unwrap();
        assert!(corr.degenerate_slots[1]);
        assert!(corr.matrix.is_finite());
        assert_eq!(corr.matrix[(0, 1)], 0.0);
    }

    #[test]
    fn correlation_invariant_to_column_rescaling() {
        let mut rng = crate::numerics::Rng::new(4);
        let m = Matrix::from_fn(6, 3, |_, _| rng.uniform() + 0.01);
        let base = plan_correlation(&plan_from_matrix(m.clone())).unwrap();
        let mut scaled = m.clone();
        for t in 0..6 {
            scaled[(t, 1)] *= 7.5;
        }
        let after = plan_correlation(&plan_from_matrix(scaled)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_close(base.matrix[(i, j)], after.matrix[(i, j)], 1e-10);
            }
        }
    }

    #[test]
    fn identity_like_plan_has_full_erank() {
        let k = 5;
        let m = Matrix::from_fn(k, k, |i, j| if i == j { 1.0 / k as f64 } else { 0.0 });
        let spec = plan_spectrum(&plan_from_matrix(m)).unwrap();
        assert_close(spec.erank, k as f64, 1e-9);
        assert_close(spec.spectrum.iter().sum::<f64>(), 1.0, 1e-12);
    }

    #[test]
    fn rank_one_plan_has_unit_erank() {
        let rho = [0.1, 0.2, 0.3, 0.4];
        let m = Matrix::from_fn(4, 3, |t, _| rho[t] / 3.0);
        let spec = plan_spectrum(&plan_from_matrix(m)).unwrap();
        assert_close(spec.erank, 1.0, 1e-9);
    }

    #[test]
    fn zero_plan_is_degenerate() {
        assert!(matches!(
            plan_spectrum(&plan_from_matrix(Matrix::zeros(3, 2))),
            Err(DiagError::DegenerateInput(_))
        ));
    }

    #[test]
    fn block_diagonal_spectrum_is_union_of_block_spectra() {
        let mut rng = crate::numerics::Rng::new(5);
        let a = Matrix::from_fn(4, 2, |_, _| rng.uniform() + 0.05);
        let b = Matrix::from_fn(3, 2, |_, _| rng.uniform() + 0.05);
        let mut full = Matrix::zeros(7, 4);
        for t in 0..4 {
            for k in 0..2 {
                full[(t, k)] = a[(t, k)];
            }
        }
        for t in 0..3 {
            for k in 0..2 {
                full[(4 + t, 2 + k)] = b[(t, k)];
            }
        }
        let plan = TransmissionPlan {
            sender_marginals: full.row_sums(),
            receiver_marginals: full.col_sums(),
            blocks: vec![(0..4, 0..2), (4..7, 2..4)],
            max_row_residual: 0.0,
            plan: full,
        };
        let whole = numerics::singular_values(&plan.plan).unwrap();
        let mut parts = numerics::singular_values(&a).unwrap();
        parts.extend(numerics::singular_values(&b).unwrap());
        parts.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (w, p) in whole.iter().zip(&parts) {
            assert_close(*w, *p, 1e-10);
        }
    }

    #[test]
    fn mean_offdiag_is_segment_restricted() {
        // Correlation matrix with strong cross-segment entries that must be
        // ignored by the within-segment mean.
        let mut corr = Matrix::identity(4);
        corr[(0, 1)] = 0.5;
        corr[(1, 0)] = 0.5;
        corr[(2, 3)] = -0.25;
        corr[(3, 2)] = -0.25;
        corr[(0, 3)] = 0.99;
        corr[(3, 0)] = 0.99;
        let blocks = vec![(0..2, 0..2), (2..4, 2..4)];
        let mean = mean_abs_offdiag_within_segments(&corr, &blocks);
        assert_close(mean, (0.5 + 0.5 + 0.25 + 0.25) / 4.0, 1e-12);
    }

    #[test]
    fn export_roundtrip_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_fn(3, 3, |i, j| (i as f64 + 0.37) * (j as f64 - 1.21));
        let plan = plan_from_matrix(Matrix::from_fn(4, 3, |t, k| ((t + k) as f64).sin().abs() + 0.01));
        let report = DiagReport {
            correlation: plan_correlation(&plan).unwrap(),
            spectrum: plan_spectrum(&plan).unwrap(),
            gate_heatmap: m,
            meta: ReportMeta {
                version: "v0.1.0".into(),
                seed: 7,
                config_sha256: "abc".into(),
                config: serde_json::json!({"k": 1}),
            },
        };
        let sub = dir.path().join("nested").join("out");
        export_report(&report, &sub).unwrap();

        let gates = std::fs::read_to_string(sub.join("gates.csv")).unwrap();
        for (r, line) in gates.lines().enumerate() {
            for (c, cell) in line.split(',').enumerate() {
                let parsed: f32 = cell.parse().unwrap();
                assert_eq!(parsed, report.gate_heatmap[(r, c)] as f32);
            }
        }
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sub.join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["config_sha256"], "abc");
        assert_eq!(meta["seed"], 7);
    }

    #[test]
    fn plan_exports_are_consistent() {
        let plan = plan_from_matrix(Matrix::from_fn(4, 2, |t, k| (t * 2 + k) as f64 * 0.05));
        let csv = plan_to_csv(&plan);
        assert_eq!(csv.lines().count(), 4);
        let json: serde_json::Value = serde_json::from_str(&plan_to_json(&plan)).unwrap();
        assert_eq!(json["num_tokens"], 4);
        assert_eq!(json["num_slots"], 2);
        assert_eq!(json["blocks"][0]["values"].as_array().unwrap().len(), 8);
    }
}
