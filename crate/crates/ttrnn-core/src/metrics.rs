//! Append-only training metrics with CSV output.
//!
//! Columns: epoch, step, split, loss, accuracy_or_eer, grad_norm_p50,
//! grad_norm_p95, lr, wall_ms. Wall time lives in its own column so the
//! remaining bytes are deterministic under a fixed seed; dataset provenance
//! goes into a comment header line.

use std::path::Path;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy_or_eer: f64,
    pub grad_norm_p50: f64,
    pub grad_norm_p95: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub fingerprint: String,
    rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str =
    "epoch,step,split,loss,accuracy_or_eer,grad_norm_p50,grad_norm_p95,lr,wall_ms";

impl MetricsLog {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        MetricsLog {
            fingerprint: fingerprint.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# fingerprint={}\n", self.fingerprint));
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.step,
                r.split,
                r.loss,
                r.accuracy_or_eer,
                r.grad_norm_p50,
                r.grad_norm_p95,
                r.lr,
                r.wall_ms
            ));
        }
        out
    }

    /// CSV bytes with the wall_ms column removed; equal across reruns of the
    /// same seeded configuration.
    pub fn to_csv_deterministic(&self) -> String {
        self.to_csv()
            .lines()
            .map(|line| {
                if line.starts_with('#') {
                    line.to_string()
                } else {
                    match line.rfind(',') {
                        Some(pos) => line[..pos].to_string(),
                        None => line.to_string(),
                    }
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Last row for the given split, if any.
    pub fn last_for_split(&self, split: &str) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

/// Percentile by nearest-rank on a copy of the data; 0 for empty input.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * (sorted.len() as f64 - 1.0)).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Histogram counts over equal-width bins, plus the bin edges. Supports the
/// gradient-norm distribution dumps.
pub fn histogram(values: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    assert!(bins >= 1);
    if values.is_empty() {
        return (vec![0.0; bins + 1], vec![0; bins]);
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-300);
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    (edges, counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, wall: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            step: epoch * 10,
            split: "train",
            loss: 0.5,
            accuracy_or_eer: 0.9,
            grad_norm_p50: 1.0,
            grad_norm_p95: 2.0,
            lr: 0.001,
            wall_ms: wall,
        }
    }

    #[test]
    fn csv_has_fingerprint_header_and_rows() {
        let mut log = MetricsLog::new("src=test seed=1");
        log.push(row(0, 12.5));
        let csv = log.to_csv();
        assert!(csv.starts_with("# fingerprint=src=test seed=1\n"));
        assert!(csv.contains(METRICS_HEADER));
        assert!(csv.contains("0,0,train,0.5,0.9,1,2,0.001,12.5"));
    }

    #[test]
    fn deterministic_csv_drops_only_wall_time() {
        let mut a = MetricsLog::new("fp");
        let mut b = MetricsLog::new("fp");
        a.push(row(1, 10.0));
        b.push(row(1, 99.0));
        assert_ne!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_csv_deterministic(), b.to_csv_deterministic());
    }

    #[test]
    fn percentile_nearest_rank() {
        let vals = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&vals, 50.0), 3.0);
        assert_eq!(percentile(&vals, 0.0), 1.0);
        assert_eq!(percentile(&vals, 100.0), 5.0);
    }

    #[test]
    fn histogram_counts_sum_to_len() {
        let vals: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let (edges, counts) = histogram(&vals, 7);
        assert_eq!(edges.len(), 8);
        assert_eq!(counts.iter().sum::<usize>(), 100);
    }
}
