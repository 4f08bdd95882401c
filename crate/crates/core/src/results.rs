//! Run outputs: per-round metrics, the summary document, and their CSV/JSON
//! serializations.
//!
//! The per-round CSV is the contract for downstream plotting. All columns
//! except `seconds` are deterministic functions of (config, seed); wall
//! clock is measurement, so determinism comparisons strip that column.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::{Error, Result};

/// Metrics recorded after each communication round. Bit counters are
/// cumulative; `bits_down` counts the broadcast once per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Held-out accuracy of the deployed model (posterior means, pruned
    /// entries zeroed).
    pub acc: f64,
    pub bits_up: u64,
    pub bits_down: u64,
    /// Fraction of nonzero weights.
    pub sparsity: f64,
    /// Negative evidence lower bound (variational method only).
    pub nelb: Option<f64>,
    pub seconds: f64,
}

/// Structure-recovery metrics against a planted ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub per_layer_iou: Vec<f64>,
    /// IoU pooled over every weight cell of every layer.
    pub overall_iou: f64,
}

/// Empirical convergence monitoring over the NELB sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Rounds where the trailing-window NELB average increased.
    pub trailing_violations: Vec<usize>,
    /// Largest relative increase among those violations.
    pub max_violation_rel: f64,
    /// Largest end-of-round client gradient norm seen in the run.
    pub max_grad_norm: f64,
    /// Whether every sum-product exchange converged.
    pub spmp_always_converged: bool,
    /// Largest turbo-consistency residual across rounds.
    pub max_turbo_residual: f64,
}

/// End-of-run summary, including the effective configuration (which can be
/// fed back in to reproduce the run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub effective_config: ExperimentConfig,
    pub client_sizes: Vec<usize>,
    pub initial_acc: f64,
    pub final_acc: f64,
    pub final_sparsity: f64,
    pub total_bits_up: u64,
    pub total_bits_down: u64,
    pub structure: Option<StructureMetrics>,
    pub convergence: Option<ConvergenceReport>,
    pub wall_seconds: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub rounds: Vec<RoundMetrics>,
    pub summary: RunSummary,
    pub ledger: crate::sim::CommLedger,
}

/// Render the per-round CSV (header plus one row per round). Floats use
/// shortest round-trip formatting so equal runs produce equal bytes.
pub fn rounds_csv(rounds: &[RoundMetrics]) -> String {
    let mut out = String::from("round,acc,bits_up,bits_down,sparsity,nelb,seconds\n");
    for r in rounds {
        let nelb = r.nelb.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round, r.acc, r.bits_up, r.bits_down, r.sparsity, nelb, r.seconds
        ));
    }
    out
}

/// Drop the wall-clock column, keeping everything deterministic.
pub fn strip_seconds(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            let cut = line.rfind(',').map(|i| &line[..i]).unwrap_or(line);
            format!("{cut}\n")
        })
        .collect()
}

impl ResultsBundle {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, rounds_csv(&self.rounds)).map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.summary)
            .expect("summary serializes") + "\n";
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Trailing-window average violations: indices (into `values`) where the
/// window mean rose compared to the previous position, with the relative
/// increase. The first full window is the baseline.
pub fn trailing_average_violations(values: &[f64], window: usize) -> Vec<(usize, f64)> {
    assert!(window > 0);
    if values.len() < window + 1 {
        return Vec::new();
    }
    let avg = |end: usize| -> f64 {
        values[end + 1 - window..=end].iter().sum::<f64>() / window as f64
    };
    let mut out = Vec::new();
    let mut prev = avg(window - 1);
    for end in window..values.len() {
        let cur = avg(end);
        if cur > prev {
            let rel = (cur - prev) / prev.abs().max(f64::MIN_POSITIVE);
            out.push((end, rel));
        }
        prev = cur;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(round: usize, nelb: Option<f64>) -> RoundMetrics {
        RoundMetrics {
            round,
            acc: 0.5,
            bits_up: 100,
            bits_down: 50,
            sparsity: 0.25,
            nelb,
            seconds: 0.123,
        }
    }

    #[test]
    fn csv_shape_and_empty_nelb() {
        let csv = rounds_csv(&[metric(0, Some(1.5)), metric(1, None)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "round,acc,bits_up,bits_down,sparsity,nelb,seconds");
        assert!(lines[1].contains(",1.5,"));
        assert!(lines[2].contains(",,"));
    }

    #[test]
    fn seconds_column_strips_cleanly() {
        let csv = rounds_csv(&[metric(0, Some(1.0))]);
        let stripped = strip_seconds(&csv);
        assert!(stripped.lines().next().unwrap().ends_with("nelb"));
        assert!(!stripped.contains("0.123"));
    }

    #[test]
    fn monotone_sequences_have_no_violations() {
        let v: Vec<f64> = (0..30).map(|i| 100.0 - i as f64).collect();
        assert!(trailing_average_violations(&v, 5).is_empty());
    }

    #[test]
    fn single_bump_is_flagged_once_the_window_rises() {
        let mut v: Vec<f64> = (0..20).map(|i| 100.0 - i as f64).collect();
        v[10] = 200.0;
        let viol = trailing_average_violations(&v, 5);
        assert_eq!(viol.len(), 1);
        assert_eq!(viol[0].0, 10);
        assert!(viol[0].1 > 0.0);
    }

    #[test]
    fn short_sequences_are_vacuously_clean() {
        assert!(trailing_average_violations(&[1.0, 2.0, 3.0], 5).is_empty());
    }
}
