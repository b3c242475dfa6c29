//! Statistical tests for judging calibrated detector tables against truth.
//!
//! The decision procedure mirrors standard practice for paired count
//! comparisons: per detector, test the interval differences for normality
//! (Shapiro-Wilk, Royston's AS R94 approximation), then apply the paired
//! t-test when normality holds and the Wilcoxon signed-rank test otherwise.
//! Every special function used by the tests (normal quantile and CDF, log
//! gamma, regularized incomplete beta) is implemented here on f64.

use thiserror::Error;

use crate::env::GroundTruthTable;
use crate::network::NetworkSpec;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} observations, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("sample size {0} is not supported")]
    TooManySamples(usize),
    #[error("all values are identical")]
    AllIdentical,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("non-finite input")]
    NonFinite,
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("table shapes differ")]
    ShapeMismatch,
}

// --- special functions -------------------------------------------------------

/// Standard normal quantile (inverse CDF), Acklam's rational approximation.
/// Relative error is below 1.15e-9 over the open unit interval.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf polynomial
/// (absolute error below 1.5e-7).
pub fn normal_cdf(x: f64) -> f64 {
    const A1: f64 = 0.254829592;
    const A2: f64 = -0.284496736;
    const A3: f64 = 1.421413741;
    const A4: f64 = -1.453152027;
    const A5: f64 = 1.061405429;
    const P: f64 = 0.3275911;

    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let z = (x * std::f64::consts::FRAC_1_SQRT_2).abs();
    let t = 1.0 / (1.0 + P * z);
    let poly = ((((A5 * t + A4) * t + A3) * t + A2) * t + A1) * t;
    let erf = sign * (1.0 - poly * (-z * z).exp());
    0.5 * (1.0 + erf)
}

/// Natural log of the gamma function, Lanczos approximation (g = 7, 9
/// coefficients); accurate to ~1e-13 for positive arguments.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    assert!(x > 0.0, "ln_gamma needs a positive argument");
    if x < 0.5 {
        // Reflection keeps the Lanczos series in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta function I_x(a, b) via the Lentz continued
/// fraction, with the symmetry flip for fast convergence.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0);
    assert!((0.0..=1.0).contains(&x));
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom:
/// I_{df/(df+t^2)}(df/2, 1/2).
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    assert!(df > 0.0);
    if !t.is_finite() {
        return 0.0;
    }
    incomplete_beta(0.5 * df, 0.5, df / (df + t * t))
}

// --- Shapiro-Wilk ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p_value: f64,
    pub n: usize,
}

fn poly(coef: &[f64], x: f64) -> f64 {
    let mut acc = *coef.last().expect("nonempty coefficients");
    for &c in coef.iter().rev().skip(1) {
        acc = acc * x + c;
    }
    acc
}

/// Shapiro-Wilk normality test, Royston's AS R94 approximation, valid for
/// 3 <= n <= 5000. All-identical samples are rejected as `AllIdentical`.
pub fn shapiro_wilk(sample: &[f64]) -> Result<ShapiroWilk, StatsError> {
    let n = sample.len();
    if n < 3 {
        return Err(StatsError::TooFewSamples { need: 3, got: n });
    }
    if n > 5000 {
        return Err(StatsError::TooManySamples(n));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut x = sample.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let range = x[n - 1] - x[0];
    if range == 0.0 {
        return Err(StatsError::AllIdentical);
    }

    // Half-sample coefficient vector, 1-based like the published algorithm.
    let nn2 = n / 2;
    let mut a = vec![0.0; nn2 + 1];
    if n == 3 {
        a[1] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let an = n as f64;
        let an25 = an + 0.25;
        let mut summ2 = 0.0;
        for (i, ai) in a.iter_mut().enumerate().skip(1) {
            *ai = normal_quantile((i as f64 - 0.375) / an25);
            summ2 += *ai * *ai;
        }
        summ2 *= 2.0;
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let a1 = poly(&C1, rsn) - a[1] / ssumm2;
        let (i1, fac) = if n > 5 {
            let a2 = poly(&C2, rsn) - a[2] / ssumm2;
            let fac = ((summ2 - 2.0 * a[1] * a[1] - 2.0 * a[2] * a[2])
                / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
                .sqrt();
            a[2] = a2;
            (3, fac)
        } else {
            let fac = ((summ2 - 2.0 * a[1] * a[1]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (2, fac)
        };
        a[1] = a1;
        for ai in a.iter_mut().take(nn2 + 1).skip(i1) {
            *ai /= -fac;
        }
    }

    // W is the squared correlation between the ordered sample and the
    // antisymmetric coefficient vector. Work on range-scaled data and the
    // 1 - W residual form for accuracy near W = 1.
    let coef = |i: usize| -> f64 {
        let j = n - 1 - i;
        match i.cmp(&j) {
            std::cmp::Ordering::Less => -a[i + 1],
            std::cmp::Ordering::Greater => a[j + 1],
            std::cmp::Ordering::Equal => 0.0,
        }
    };
    let sa: f64 = (0..n).map(coef).sum::<f64>() / n as f64;
    let sx: f64 = x.iter().map(|v| v / range).sum::<f64>() / n as f64;
    let (mut ssa, mut ssx, mut sax) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let da = coef(i) - sa;
        let dx = x[i] / range - sx;
        ssa += da * da;
        ssx += dx * dx;
        sax += da * dx;
    }
    let ssassx = (ssa * ssx).sqrt();
    let w1 = (ssassx - sax) * (ssassx + sax) / (ssa * ssx);
    let w = (1.0 - w1).clamp(0.0, 1.0);

    // p-value branches of AS R94.
    let p_value = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::FRAC_PI_3;
        (pi6 * (w.sqrt().asin() - stqr)).clamp(0.0, 1.0)
    } else {
        let an = n as f64;
        let y = (1.0 - w).ln();
        if n <= 11 {
            let gamma = poly(&[-2.273, 0.459], an);
            if y >= gamma {
                1e-99
            } else {
                let yt = -(gamma - y).ln();
                let m = poly(&[0.544, -0.39978, 0.025054, -0.0006714], an);
                let s = poly(&[1.3822, -0.77857, 0.062767, -0.0020322], an).exp();
                1.0 - normal_cdf((yt - m) / s)
            }
        } else {
            let xx = an.ln();
            let m = poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], xx);
            let s = poly(&[-0.4803, -0.082676, 0.0030302], xx).exp();
            1.0 - normal_cdf((y - m) / s)
        }
    };
    Ok(ShapiroWilk { w, p_value, n })
}

// --- paired tests ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    PairedT,
    WilcoxonSignedRank,
    /// No test ran: every paired difference was zero, so the samples agree
    /// exactly and the comparison is declared insignificant (p = 1).
    AllZeroDifferences,
}

impl std::fmt::Display for TestKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            TestKind::PairedT => "paired-t",
            TestKind::WilcoxonSignedRank => "wilcoxon",
            TestKind::AllZeroDifferences => "all-zero",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOutcome {
    pub test: TestKind,
    pub statistic: f64,
    pub p_value: f64,
    /// Effective sample size (zero differences are dropped by Wilcoxon).
    pub n: usize,
}

fn paired_differences(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    let d: Vec<f64> = xs.iter().zip(ys).map(|(a, b)| a - b).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(d)
}

/// Two-sided paired t-test. The statistic is `mean(d) / (sd(d)/sqrt(n))`
/// with the n-1 sample standard deviation.
pub fn paired_t(xs: &[f64], ys: &[f64]) -> Result<TestOutcome, StatsError> {
    let d = paired_differences(xs, ys)?;
    let n = d.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples { need: 2, got: n });
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return if mean == 0.0 {
            Err(StatsError::AllZeroDifferences)
        } else {
            Err(StatsError::AllIdentical)
        };
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let p = t_two_sided_p(t, (n - 1) as f64);
    Ok(TestOutcome { test: TestKind::PairedT, statistic: t, p_value: p, n })
}

/// Ranks of |values| ascending with average ranks on ties, doubled so they
/// stay integral, plus the tie-correction term `sum(t^3 - t)`.
fn doubled_abs_ranks(d: &[f64]) -> (Vec<u64>, f64) {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().partial_cmp(&d[j].abs()).expect("finite"));
    let mut ranks2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let doubled_avg = (i + 1 + j + 1) as u64; // 2 * average rank
        for &idx in &order[i..=j] {
            ranks2[idx] = doubled_avg;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    (ranks2, tie_term)
}

/// Exact null distribution tail of the signed-rank min statistic: the number
/// of sign assignments whose min(W+, W-) is <= the observed doubled value,
/// over 2^n total, computed by dynamic programming over rank sums.
fn exact_min_signrank_p(ranks2: &[u64], w2: u64) -> f64 {
    let total: u64 = ranks2.iter().sum();
    let mut dp = vec![0.0f64; total as usize + 1];
    dp[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        let new_reach = reach + r;
        for s in (0..=reach).rev() {
            if dp[s] > 0.0 {
                dp[s + r] += dp[s];
            }
        }
        reach = new_reach;
    }
    let count: f64 = dp
        .iter()
        .enumerate()
        .filter(|&(s, _)| (s as u64).min(total - s as u64) <= w2)
        .map(|(_, &c)| c)
        .sum();
    count / 2.0f64.powi(ranks2.len() as i32)
}

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped; ties
/// in |d| get average ranks. Up to n = 20 the p-value is exact (tail of the
/// enumerated null distribution of min(W+, W-)); beyond that it uses the
/// normal approximation with tie correction and continuity correction.
pub fn wilcoxon_signed_rank(xs: &[f64], ys: &[f64]) -> Result<TestOutcome, StatsError> {
    let d: Vec<f64> = paired_differences(xs, ys)?.into_iter().filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(StatsError::AllZeroDifferences);
    }
    let (ranks2, tie_term) = doubled_abs_ranks(&d);
    let w_plus2: u64 = d
        .iter()
        .zip(&ranks2)
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let total2: u64 = ranks2.iter().sum();
    let w2 = w_plus2.min(total2 - w_plus2);
    let w = w2 as f64 / 2.0;

    let p = if n <= 20 {
        exact_min_signrank_p(&ranks2, w2)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        // W <= mean by construction; continuity-correct toward the mean.
        let z = (w - mean + 0.5) / var.sqrt();
        (2.0 * normal_cdf(z)).min(1.0)
    };
    Ok(TestOutcome { test: TestKind::WilcoxonSignedRank, statistic: w, p_value: p, n })
}

// --- decision pipeline ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineRow {
    pub detector_link: usize,
    /// Normality pretest on the differences; absent when it could not run
    /// (all differences zero or identical).
    pub shapiro: Option<ShapiroWilk>,
    /// Normality verdict feeding the test choice; absent for all-zero
    /// columns where no test is needed.
    pub normal: Option<bool>,
    pub chosen: TestOutcome,
}

/// Per-detector comparison of a simulated interval table against the ground
/// truth. For each detector column the interval differences are tested for
/// normality at `alpha`; normal columns get the paired t-test, non-normal
/// ones the Wilcoxon signed-rank test. Columns with identical counts in
/// every interval skip testing with p = 1. An undefined Shapiro-Wilk
/// (identical nonzero differences, or fewer than three intervals) counts
/// as non-normal.
pub fn significance_pipeline(
    sim: &GroundTruthTable,
    truth: &GroundTruthTable,
    network: &NetworkSpec,
    alpha: f64,
) -> Result<Vec<PipelineRow>, StatsError> {
    if sim.k_intervals() != truth.k_intervals()
        || sim.n_detectors() != truth.n_detectors()
        || sim.n_detectors() != network.n_detectors()
    {
        return Err(StatsError::ShapeMismatch);
    }
    assert!(alpha > 0.0 && alpha < 1.0);
    let k = sim.k_intervals();
    let mut rows = Vec::with_capacity(sim.n_detectors());
    for (j, &detector_link) in network.detectors.iter().enumerate() {
        let sim_col: Vec<f64> = (0..k).map(|i| sim.rows[i][j] as f64).collect();
        let truth_col: Vec<f64> = (0..k).map(|i| truth.rows[i][j] as f64).collect();
        let diffs: Vec<f64> = sim_col.iter().zip(&truth_col).map(|(a, b)| a - b).collect();

        if diffs.iter().all(|&d| d == 0.0) {
            rows.push(PipelineRow {
                detector_link,
                shapiro: None,
                normal: None,
                chosen: TestOutcome {
                    test: TestKind::AllZeroDifferences,
                    statistic: 0.0,
                    p_value: 1.0,
                    n: k,
                },
            });
            continue;
        }

        let (shapiro, normal) = match shapiro_wilk(&diffs) {
            Ok(sw) => {
                let normal = sw.p_value > alpha;
                (Some(sw), normal)
            }
            // No usable normality pretest (identical differences, or fewer
            // than three intervals): fall back to the nonparametric branch.
            Err(StatsError::AllIdentical) | Err(StatsError::TooFewSamples { .. }) => (None, false),
            Err(e) => return Err(e),
        };
        let chosen = if normal {
            paired_t(&sim_col, &truth_col)?
        } else {
            wilcoxon_signed_rank(&sim_col, &truth_col)?
        };
        rows.push(PipelineRow { detector_link, shapiro, normal: Some(normal), chosen });
    }
    Ok(rows)
}
