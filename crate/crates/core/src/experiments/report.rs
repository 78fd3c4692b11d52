//! CSV layout of experiment outputs and per-iteration summaries across
//! repetitions. Floats are written with Rust's shortest round-trip format so
//! re-reading a file reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{Algorithm, ConfigError, MetricsRow, QMetrics, RowStatus, TimingRow};

const METRICS_HEADER: &str =
    "algorithm,r_variance,rep,em_iter,status,fp_iters,stop_em,stop_fp_last,\
q_diag_mean,q_offdiag_absmean,q_subdiag_mean,frob_to_true,loglik_proxy";

/// Columns summarized by [`summarize`], in output order.
pub const SUMMARY_METRICS: [&str; 5] = [
    "q_diag_mean",
    "q_offdiag_absmean",
    "q_subdiag_mean",
    "frob_to_true",
    "loglik_proxy",
];

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.algorithm.name(),
            r.r_variance,
            r.rep,
            r.em_iter,
            r.status.name(),
            r.fp_iters,
            r.stop_em,
            r.stop_fp_last,
            m.diag_mean,
            m.offdiag_absmean,
            m.subdiag_mean,
            m.frob_to_true,
            r.loglik_proxy
        );
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>, ConfigError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(ConfigError::Syntax {
                line: 1,
                message: "not a metrics table: unexpected header".into(),
            })
        }
    }
    lines
        .map(|(idx, line)| {
            let line_no = idx + 1;
            let err = |message: String| ConfigError::Syntax {
                line: line_no,
                message,
            };
            let c: Vec<&str> = line.split(',').map(str::trim).collect();
            if c.len() != 13 {
                return Err(err(format!("expected 13 cells, found {}", c.len())));
            }
            let f = |i: usize| {
                c[i].parse::<f64>()
                    .map_err(|_| err(format!("bad number `{}`", c[i])))
            };
            let u = |i: usize| {
                c[i].parse::<usize>()
                    .map_err(|_| err(format!("bad count `{}`", c[i])))
            };
            Ok(MetricsRow {
                algorithm: c[0].parse::<Algorithm>().map_err(err)?,
                r_variance: f(1)?,
                rep: u(2)?,
                em_iter: u(3)?,
                status: match c[4] {
                    "ok" => RowStatus::Ok,
                    "converged" => RowStatus::Converged,
                    "failed" => RowStatus::Failed,
                    s => return Err(err(format!("bad status `{s}`"))),
                },
                fp_iters: u(5)?,
                stop_em: f(6)?,
                stop_fp_last: f(7)?,
                metrics: QMetrics {
                    diag_mean: f(8)?,
                    offdiag_absmean: f(9)?,
                    subdiag_mean: f(10)?,
                    frob_to_true: f(11)?,
                },
                loglik_proxy: f(12)?,
            })
        })
        .collect()
}

pub fn timing_to_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("algorithm,r_variance,rep,em_iter,wallclock_s\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.algorithm.name(),
            r.r_variance,
            r.rep,
            r.em_iter,
            r.wallclock_s
        );
    }
    out
}

/// Sample statistics of one metric at one EM iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Describe {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator); 0 when `n = 1`.
    pub sd: f64,
    /// `mean ± 1.96 sd / √n`
    pub ci: (f64, f64),
    /// 5, 25, 50, 75 and 95% quantiles by linear interpolation between order statistics.
    pub quantiles: [f64; 5],
}

/// Statistics of a non-empty sample.
pub fn describe(values: &[f64]) -> Describe {
    assert!(!values.is_empty(), "describe needs at least one value");
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let half = 1.96 * sd / (n as f64).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |p: f64| {
        let h = (n - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    Describe {
        n,
        mean,
        sd,
        ci: (mean - half, mean + half),
        quantiles: [0.05, 0.25, 0.5, 0.75, 0.95].map(quantile),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub algorithm: Algorithm,
    pub r_variance: f64,
    pub em_iter: usize,
    pub metric: &'static str,
    pub stats: Describe,
}

fn metric_value(row: &MetricsRow, metric: &str) -> f64 {
    match metric {
        "q_diag_mean" => row.metrics.diag_mean,
        "q_offdiag_absmean" => row.metrics.offdiag_absmean,
        "q_subdiag_mean" => row.metrics.subdiag_mean,
        "frob_to_true" => row.metrics.frob_to_true,
        "loglik_proxy" => row.loglik_proxy,
        _ => unreachable!("unknown metric {metric}"),
    }
}

/// Per arm and EM iteration statistics over repetitions. Failed repetitions
/// are left out; a repetition that stopped early contributes its last
/// iterate to every later iteration. Non-finite values are skipped.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    // (algorithm, r bits) → rep → rows ordered by em_iter
    let mut arms: BTreeMap<(Algorithm, u64), BTreeMap<usize, Vec<&MetricsRow>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status != RowStatus::Failed) {
        arms.entry((r.algorithm, r.r_variance.to_bits()))
            .or_default()
            .entry(r.rep)
            .or_default()
            .push(r);
    }
    let mut arms: Vec<_> = arms.into_iter().collect();
    arms.sort_by(|a, b| {
        a.0 .0
            .cmp(&b.0 .0)
            .then(f64::from_bits(a.0 .1).total_cmp(&f64::from_bits(b.0 .1)))
    });
    let mut out = Vec::new();
    for ((algorithm, r_bits), mut reps) in arms {
        for v in reps.values_mut() {
            v.sort_by_key(|r| r.em_iter);
        }
        let max_iter = reps
            .values()
            .filter_map(|v| v.last())
            .map(|r| r.em_iter)
            .max()
            .unwrap_or(0);
        for s in 0..=max_iter {
            let at: Vec<&MetricsRow> = reps
                .values()
                .filter_map(|v| {
                    v.iter()
                        .rev()
                        .find(|r| r.em_iter <= s)
                        .or(v.first())
                        .copied()
                })
                .collect();
            for metric in SUMMARY_METRICS {
                let values: Vec<f64> = at
                    .iter()
                    .map(|r| metric_value(r, metric))
                    .filter(|v| v.is_finite())
                    .collect();
                if values.is_empty() {
                    continue;
                }
                out.push(SummaryRow {
                    algorithm,
                    r_variance: f64::from_bits(r_bits),
                    em_iter: s,
                    metric,
                    stats: describe(&values),
                });
            }
        }
    }
    out
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "algorithm,r_variance,em_iter,metric,n,mean,sd,ci_lo,ci_hi,q05,q25,q50,q75,q95\n",
    );
    for r in rows {
        let s = &r.stats;
        let q = &s.quantiles;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.algorithm.name(),
            r.r_variance,
            r.em_iter,
            r.metric,
            s.n,
            s.mean,
            s.sd,
            s.ci.0,
            s.ci.1,
            q[0],
            q[1],
            q[2],
            q[3],
            q[4]
        );
    }
    out
}
