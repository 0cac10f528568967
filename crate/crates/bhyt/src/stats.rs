//! Scalar agreement metrics for approximation-accuracy scatters, plus the
//! per-layer activation statistics record shared by the training logger and
//! the depth scans.

use crate::error::{BhytError, Result};
use crate::numerics::Tensor;

/// Observation site of a layer statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum StatsSite {
    PostAttn,
    PostMlp,
    ResidualStream,
}

impl StatsSite {
    pub const ALL: [StatsSite; 3] = [StatsSite::PostAttn, StatsSite::PostMlp, StatsSite::ResidualStream];

    pub fn name(&self) -> &'static str {
        match self {
            StatsSite::PostAttn => "post_attn",
            StatsSite::PostMlp => "post_mlp",
            StatsSite::ResidualStream => "residual_stream",
        }
    }
}

/// One row of the layer-statistics CSV: one per (step, layer, site).
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerStatsRecord {
    pub run_id: String,
    pub step: u64,
    pub layer: usize,
    pub site: StatsSite,
    pub mean_abs: f64,
    pub variance: f64,
    pub injected_variance: Option<f64>,
    pub exact_variance: Option<f64>,
}

/// Mean absolute value over all elements.
pub fn mean_abs(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
}

/// Mean over rows of the uncentered per-row second moment, i.e. the global
/// mean square. This is the variance convention of the zero-mean analysis.
pub fn mean_square(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// RMSE, coefficient of determination, Pearson r and Spearman ρ between a
/// predicted series and a ground-truth series.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct AgreementMetrics {
    pub rmse: f64,
    pub r_squared: f64,
    pub pearson_r: f64,
    pub spearman_rho: f64,
}

/// Compute all four metrics for `(predicted, truth)` pairs.
///
/// `r_squared` is the coefficient of determination of the identity predictor
/// (`y = x` line): `1 − Σ(truth − predicted)² / Σ(truth − mean(truth))²`. It
/// can be negative when the prediction is worse than the truth's mean.
pub fn agreement(predicted: &[f64], truth: &[f64]) -> Result<AgreementMetrics> {
    if predicted.len() != truth.len() || predicted.len() < 2 {
        return Err(BhytError::param(
            "agreement",
            format!("need ≥2 paired points, got {} vs {}", predicted.len(), truth.len()),
        ));
    }
    Ok(AgreementMetrics {
        rmse: rmse(predicted, truth),
        r_squared: r_squared_identity(predicted, truth),
        pearson_r: pearson_r(predicted, truth),
        spearman_rho: spearman_rho(predicted, truth),
    })
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ss: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    (ss / n).sqrt()
}

pub fn r_squared_identity(predicted: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let mean_y: f64 = truth.iter().sum::<f64>() / n;
    let ss_res: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(&p, &y)| (y - p) * (y - p))
        .sum();
    let ss_tot: f64 = truth.iter().map(|&y| (y - mean_y) * (y - mean_y)).sum();
    if ss_tot == 0.0 {
        // Degenerate truth series: perfect only if residuals vanish too.
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> f64 {
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson_r(&ra, &rb)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // 1-based ranks, ties share the mean rank of their span.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_identity_scatter() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let m = agreement(&x, &x).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.r_squared, 1.0);
        assert!((m.pearson_r - 1.0).abs() < 1e-12);
        assert!((m.spearman_rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_naive_reference() {
        // Naive single-pass formula references, written independently of the
        // two-pass implementations above.
        let p = [0.9, 2.1, 2.9, 4.2, 5.1];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        let n = p.len() as f64;

        let naive_rmse =
            (p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt();
        assert!((rmse(&p, &y) - naive_rmse).abs() < 1e-15);

        let sum_p: f64 = p.iter().sum();
        let sum_y: f64 = y.iter().sum();
        let sum_pp: f64 = p.iter().map(|v| v * v).sum();
        let sum_yy: f64 = y.iter().map(|v| v * v).sum();
        let sum_py: f64 = p.iter().zip(&y).map(|(a, b)| a * b).sum();
        let naive_r = (n * sum_py - sum_p * sum_y)
            / ((n * sum_pp - sum_p * sum_p).sqrt() * (n * sum_yy - sum_y * sum_y).sqrt());
        assert!((pearson_r(&p, &y) - naive_r).abs() < 1e-12);

        let mean_y = sum_y / n;
        let naive_r2 = 1.0
            - p.iter().zip(&y).map(|(a, b)| (b - a) * (b - a)).sum::<f64>()
                / y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum::<f64>();
        assert!((r_squared_identity(&p, &y) - naive_r2).abs() < 1e-12);
    }

    #[test]
    fn spearman_no_ties_matches_d_squared_formula() {
        let a = [3.0, 1.0, 4.0, 1.5, 5.0];
        let b = [2.0, 0.5, 3.0, 1.0, 10.0];
        // rank-difference formula: 1 − 6Σd²/(n(n²−1)), valid without ties
        let ra = average_ranks(&a);
        let rb = average_ranks(&b);
        let n = a.len() as f64;
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
        let reference = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!((spearman_rho(&a, &b) - reference).abs() < 1e-12);
    }

    #[test]
    fn spearman_is_rank_invariant_under_monotone_map() {
        let a: [f64; 4] = [0.1, 0.2, 0.35, 0.9];
        let b: Vec<f64> = a.iter().map(|&v| v.exp() * 100.0).collect();
        assert!((spearman_rho(&a, &b) - 1.0).abs() < 1e-12);
    }
}
