//! Error metrics between a simulated detector table and the ground truth.
//!
//! All metrics treat the tables as flat paired samples with signed error
//! `e = sim - truth`. The standard deviation of errors uses the population
//! form so that the decomposition `sde^2 + mbe^2 = mse` holds exactly.

use serde::Serialize;
use thiserror::Error;

use crate::env::GroundTruthTable;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite input")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Mean absolute percentage error over cells with nonzero truth; absent
    /// when the truth is zero everywhere.
    pub mape: Option<f64>,
    /// Population standard deviation of the signed errors.
    pub sde: f64,
    /// 95th percentile of absolute errors, linearly interpolated.
    pub p95_ae: f64,
    pub max_ae: f64,
    /// Mean bias error (mean of sim - truth).
    pub mbe: f64,
    /// Coefficient of determination; absent when the truth has no variance
    /// to explain.
    pub r2: Option<f64>,
    pub n: usize,
}

/// Absolute-error quantile with linear interpolation between order
/// statistics (the `sorted[q * (n-1)]` convention).
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

pub fn compute_metrics(truth: &[f64], sim: &[f64]) -> Result<MetricsReport, MetricsError> {
    if truth.len() != sim.len() {
        return Err(MetricsError::LengthMismatch(truth.len(), sim.len()));
    }
    let n = truth.len();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    if truth.iter().chain(sim).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let nf = n as f64;

    let mut sum_e = 0.0;
    let mut sum_e2 = 0.0;
    let mut abs_errors = Vec::with_capacity(n);
    let mut ape_sum = 0.0;
    let mut ape_n = 0usize;
    for (&t, &s) in truth.iter().zip(sim) {
        let e = s - t;
        sum_e += e;
        sum_e2 += e * e;
        abs_errors.push(e.abs());
        if t != 0.0 {
            ape_sum += e.abs() / t.abs();
            ape_n += 1;
        }
    }
    let mse = sum_e2 / nf;
    let mbe = sum_e / nf;
    // Population variance of errors via the decomposition, clamped against
    // cancellation so sde^2 + mbe^2 reproduces mse.
    let sde = (mse - mbe * mbe).max(0.0).sqrt();
    let mae = abs_errors.iter().sum::<f64>() / nf;
    let mape = (ape_n > 0).then(|| 100.0 * ape_sum / ape_n as f64);

    abs_errors.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let p95_ae = quantile(&abs_errors, 0.95);
    let max_ae = *abs_errors.last().expect("nonempty");

    let truth_mean = truth.iter().sum::<f64>() / nf;
    let ss_tot: f64 = truth.iter().map(|&t| (t - truth_mean) * (t - truth_mean)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - sum_e2 / ss_tot);

    Ok(MetricsReport {
        mse,
        rmse: mse.sqrt(),
        mae,
        mape,
        sde,
        p95_ae,
        max_ae,
        mbe,
        r2,
        n,
    })
}

/// Metrics over two equally shaped detector tables, flattened row-major.
pub fn table_metrics(
    truth: &GroundTruthTable,
    sim: &GroundTruthTable,
) -> Result<MetricsReport, MetricsError> {
    let flat = |t: &GroundTruthTable| -> Vec<f64> {
        t.rows.iter().flatten().map(|&c| c as f64).collect()
    };
    compute_metrics(&flat(truth), &flat(sim))
}
