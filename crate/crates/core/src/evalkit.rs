//! Ranking metrics, run aggregation and the paired t-test.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CUTOFFS: [usize; 2] = [10, 20];
pub const REPEATS: usize = 5;
pub const SIGNIFICANCE: f64 = 0.05;
pub const METRIC_NAMES: [&str; 4] = ["HR@10", "HR@20", "MRR@10", "MRR@20"];

/// 1-based position of `target` in `ranked`.
pub fn rank_of(ranked: &[usize], target: usize) -> Option<usize> {
    ranked.iter().position(|&x| x == target).map(|p| p + 1)
}

pub fn hit_rate(ranked: &[usize], target: usize, k: usize) -> f64 {
    hit_at(rank_of(ranked, target), k)
}

pub fn mrr(ranked: &[usize], target: usize, k: usize) -> f64 {
    reciprocal_at(rank_of(ranked, target), k)
}

pub fn hit_at(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn reciprocal_at(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    }
}

/// HR@10, HR@20, MRR@10, MRR@20 of one query.
pub fn query_metrics(rank: Option<usize>) -> [f64; 4] {
    [
        hit_at(rank, 10),
        hit_at(rank, 20),
        reciprocal_at(rank, 10),
        reciprocal_at(rank, 20),
    ]
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Metrics of one run: query means plus the per-query vectors behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub values: [f64; 4],
    pub per_query: Vec<[f64; 4]>,
}

impl RunMetrics {
    pub fn from_ranks(ranks: &[Option<usize>]) -> Self {
        let per_query: Vec<[f64; 4]> = ranks.iter().map(|&r| query_metrics(r)).collect();
        let values = std::array::from_fn(|m| mean(&per_query.iter().map(|q| q[m]).collect::<Vec<_>>()));
        Self { values, per_query }
    }

    pub fn metric(&self, m: usize) -> f64 {
        self.values[m]
    }

    pub fn query_column(&self, m: usize) -> Vec<f64> {
        self.per_query.iter().map(|q| q[m]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub runs: Vec<RunMetrics>,
}

impl MetricReport {
    pub fn new(label: impl Into<String>, runs: Vec<RunMetrics>) -> Self {
        Self {
            label: label.into(),
            runs,
        }
    }

    pub fn run_values(&self, m: usize) -> Vec<f64> {
        self.runs.iter().map(|r| r.values[m]).collect()
    }

    pub fn mean(&self, m: usize) -> f64 {
        mean(&self.run_values(m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub n: usize,
    pub df: usize,
    pub mean_diff: f64,
    /// `None` when every difference is equal and the statistic is undefined.
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub significant: bool,
}

impl TTestResult {
    pub fn is_degenerate(&self) -> bool {
        self.t.is_none()
    }
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    let sd = var.sqrt();
    if sd == 0.0 || sd <= 1e-14 * m.abs() {
        return Ok(TTestResult {
            n,
            df,
            mean_diff: m,
            t: None,
            p: None,
            significant: false,
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    let p = student_t_two_sided(t, df as f64);
    Ok(TTestResult {
        n,
        df,
        mean_diff: m,
        t: Some(t),
        p: Some(p),
        significant: p < SIGNIFICANCE,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, n = 9), relative error around 1e-15.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (k, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + k as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` by the continued fraction (modified Lentz), using the
/// symmetry `I_x(a, b) = 1 − I_{1−x}(b, a)` where it converges faster.
/// Absolute accuracy is better than 1e-12 for the parameters the t-test
/// uses.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
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
    for m in 1..=500 {
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
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Comparison of two reports, one test per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pairing: Pairing,
    pub tests: Vec<TTestResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Per-query values of the first run of each report.
    #[default]
    Query,
    /// Per-run means.
    Run,
}

pub fn compare_reports(a: &MetricReport, b: &MetricReport, pairing: Pairing) -> Result<Comparison> {
    let tests = (0..METRIC_NAMES.len())
        .map(|m| match pairing {
            Pairing::Run => paired_t_test(&a.run_values(m), &b.run_values(m)),
            Pairing::Query => {
                let (ra, rb) = match (a.runs.first(), b.runs.first()) {
                    (Some(x), Some(y)) => (x, y),
                    _ => return Err(Error::Contract("comparison needs at least one run per report".into())),
                };
                paired_t_test(&ra.query_column(m), &rb.query_column(m))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { pairing, tests })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "degenerate".to_string(), |x| format!("{x:.6}"))
}

/// Aligned table of per-run values and means, with tests when comparing.
pub fn render_table(reports: &[&MetricReport], comparison: Option<&Comparison>) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "{}", r.label);
        let _ = write!(out, "{:<8}", "metric");
        for k in 0..r.runs.len() {
            let _ = write!(out, " {:>9}", format!("run{}", k + 1));
        }
        let _ = writeln!(out, " {:>9}", "mean");
        for (m, name) in METRIC_NAMES.iter().enumerate() {
            let _ = write!(out, "{name:<8}");
            for v in r.run_values(m) {
                let _ = write!(out, " {v:>9.6}");
            }
            let _ = writeln!(out, " {:>9.6}", r.mean(m));
        }
        out.push('\n');
    }
    if let Some(c) = comparison {
        let _ = writeln!(out, "paired t-test ({:?} pairing)", c.pairing);
        for (name, t) in METRIC_NAMES.iter().zip(&c.tests) {
            let _ = writeln!(
                out,
                "{name:<8} t={} df={} p={} significant={}",
                fmt_opt(t.t),
                t.df,
                fmt_opt(t.p),
                t.significant
            );
        }
    }
    out
}

/// Tab-separated rows `label metric run value mean t p significant`; run
/// `mean` rows carry the test columns when comparing (`-` otherwise).
pub fn render_structured(reports: &[&MetricReport], comparison: Option<&Comparison>) -> String {
    let mut out = String::from("label\tmetric\trun\tvalue\tmean\tt\tp\tsignificant\n");
    for (ri, r) in reports.iter().enumerate() {
        for (m, name) in METRIC_NAMES.iter().enumerate() {
            let mean = r.mean(m);
            for (k, v) in r.run_values(m).iter().enumerate() {
                let _ = writeln!(out, "{}\t{name}\t{}\t{v:.6}\t{mean:.6}\t-\t-\t-", r.label, k + 1);
            }
            let (t, p, s) = match comparison {
                Some(c) if ri == 0 => {
                    let t = &c.tests[m];
                    (fmt_opt(t.t), fmt_opt(t.p), t.significant.to_string())
                }
                _ => ("-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(out, "{}\t{name}\tmean\t{mean:.6}\t{mean:.6}\t{t}\t{p}\t{s}", r.label);
        }
    }
    out
}

/// First 1-based epoch whose value reaches `threshold`.
pub fn epochs_to_threshold(curve: &[f64], threshold: f64) -> Option<usize> {
    curve.iter().position(|&v| v >= threshold).map(|p| p + 1)
}
