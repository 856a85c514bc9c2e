//! Per-method runtime summaries: seconds per image as mean, median and
//! 95th percentile.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::fmt_num;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl TimingRow {
    /// `None` for an empty sample.
    pub fn from_samples(method: &str, seconds: &[f64]) -> Option<TimingRow> {
        if seconds.is_empty() {
            return None;
        }
        let mut sorted = seconds.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        // nearest-rank percentile
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(TimingRow {
            method: method.to_string(),
            n,
            mean: seconds.iter().sum::<f64>() / n as f64,
            median,
            p95: sorted[rank - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

/// Methods with no samples are left out.
pub fn timing_report(methods: &[(&str, &[f64])]) -> TimingTable {
    TimingTable { rows: methods.iter().filter_map(|(m, s)| TimingRow::from_samples(m, s)).collect() }
}

impl TimingTable {
    pub fn row(&self, method: &str) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,n,mean_s,median_s,p95_s\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.method, r.n, fmt_num(r.mean), fmt_num(r.median), fmt_num(r.p95));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("method".len());
        let mut s = format!("{:<width$}  {:>6}  {:>12}  {:>12}  {:>12}\n", "method", "n", "mean s/img", "median", "p95");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>6}  {:>12.6}  {:>12.6}  {:>12.6}", r.method, r.n, r.mean, r.median, r.p95);
        }
        if let [a, b, ..] = self.rows.as_slice() {
            if a.mean > 0.0 && b.mean > 0.0 {
                let (fast, slow) = if a.mean <= b.mean { (a, b) } else { (b, a) };
                let _ = writeln!(s, "{} is {:.2}x faster than {} per image", fast.method, slow.mean / fast.mean, slow.method);
            }
        }
        s
    }
}
