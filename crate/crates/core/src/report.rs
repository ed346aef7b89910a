//! Experiment reports: per-iteration diagnostics with deterministic CSV and
//! JSON serialization.
//!
//! Wall-clock timings are collected alongside but deliberately excluded from
//! the CSV/JSON artifacts, which must be byte-identical across repeated runs.

use crate::advantage::AdvantageRecord;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Version string embedded as the first comment line of every CSV file.
pub const REPORT_SCHEMA: &str = "turnlab-report-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    /// Exact `J(pi_k)` at the start of the iteration.
    pub exact_return: f64,
    /// `J* - J(pi_k)` when the environment has an oracle value.
    pub gap_to_optimal: Option<f64>,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    /// Turn order used this iteration (sequential algorithms only).
    pub update_order: Option<Vec<usize>>,
    pub turn_clip_fractions: Option<Vec<f64>>,
    pub turn_mean_abs_m: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub algorithm: String,
    pub mode: String,
    pub config_echo: serde_json::Value,
    pub optimal_return: Option<f64>,
    pub rows: Vec<IterationRow>,
    /// Exact return of the final policy, after the last update.
    pub final_return: f64,
    pub final_gap_to_optimal: Option<f64>,
    /// Advantage records of the final iteration, when the algorithm tracks
    /// per-trajectory estimates (sequence-level runs and sampled
    /// group-relative runs). Emitted as a separate diagnostics CSV.
    #[serde(skip)]
    pub advantage_records: Vec<AdvantageRecord>,
    /// Wall-clock per iteration, milliseconds. Never serialized: reports
    /// must be byte-identical across runs.
    #[serde(skip)]
    pub wall_times_ms: Vec<f64>,
}

impl ExperimentReport {
    pub fn new(algorithm: &str, mode: &str, config_echo: serde_json::Value) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            algorithm: algorithm.to_string(),
            mode: mode.to_string(),
            config_echo,
            optimal_return: None,
            rows: Vec::new(),
            final_return: f64::NAN,
            final_gap_to_optimal: None,
            advantage_records: Vec::new(),
            wall_times_ms: Vec::new(),
        }
    }

    /// Smallest per-iteration change of exact return; negative values are
    /// monotonicity violations.
    pub fn min_return_delta(&self) -> f64 {
        let mut returns: Vec<f64> = self.rows.iter().map(|r| r.exact_return).collect();
        returns.push(self.final_return);
        returns
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# schema: {}\n", self.schema));
        out.push_str(&format!("# algorithm: {}\n# mode: {}\n", self.algorithm, self.mode));
        out.push_str(
            "iteration,exact_return,gap_to_optimal,grad_norm,clip_fraction,adv_mean,adv_std,update_order,turn_clip_fractions,turn_mean_abs_m\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                row.iteration,
                fmt(row.exact_return),
                row.gap_to_optimal.map(fmt).unwrap_or_default(),
                fmt(row.grad_norm),
                fmt(row.clip_fraction),
                fmt(row.adv_mean),
                fmt(row.adv_std),
                row.update_order
                    .as_ref()
                    .map(|o| join_usize(o))
                    .unwrap_or_default(),
                row.turn_clip_fractions
                    .as_ref()
                    .map(|v| join_f64(v))
                    .unwrap_or_default(),
                row.turn_mean_abs_m
                    .as_ref()
                    .map(|v| join_f64(v))
                    .unwrap_or_default(),
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Final-iteration advantage diagnostics as CSV; empty string when the
    /// run carries no per-trajectory records.
    pub fn advantage_csv(&self) -> String {
        if self.advantage_records.is_empty() {
            return String::new();
        }
        let mut out = String::from("# schema: turnlab-advantages-v1\n");
        out.push_str(
            "group,trajectory,turn,estimator,raw,normalized,group_std,batch_mean,batch_std,degenerate\n",
        );
        for r in &self.advantage_records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.group,
                r.trajectory,
                r.step.map(|s| s.to_string()).unwrap_or_default(),
                serde_json::to_value(r.estimator)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                fmt(r.raw),
                fmt(r.normalized),
                r.group_std.map(fmt).unwrap_or_default(),
                r.batch_mean.map(fmt).unwrap_or_default(),
                r.batch_std.map(fmt).unwrap_or_default(),
                r.degenerate,
            ));
        }
        out
    }

    /// Writes `<prefix>.csv`, `<prefix>.json`, and (when records exist)
    /// `<prefix>.advantages.csv` atomically (temp file + rename), so partial
    /// artifacts never appear.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        write_atomic(&prefix.with_extension("csv"), self.to_csv().as_bytes())?;
        write_atomic(&prefix.with_extension("json"), self.to_json()?.as_bytes())?;
        let advantages = self.advantage_csv();
        if !advantages.is_empty() {
            write_atomic(&prefix.with_extension("advantages.csv"), advantages.as_bytes())?;
        }
        Ok(())
    }
}

/// Shortest round-trip decimal form; deterministic for identical bit
/// patterns.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(";")
}

fn join_usize(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_schema_comment_and_stable_bytes() {
        let mut report = ExperimentReport::new("grae-reinforce", "exact", serde_json::json!({}));
        report.rows.push(IterationRow {
            iteration: 0,
            exact_return: 0.5,
            gap_to_optimal: Some(0.25),
            grad_norm: 1.0,
            clip_fraction: 0.0,
            adv_mean: 0.0,
            adv_std: 0.1,
            update_order: Some(vec![3, 2, 1]),
            turn_clip_fractions: Some(vec![0.0, 0.5]),
            turn_mean_abs_m: None,
        });
        report.final_return = 0.75;
        report.wall_times_ms.push(123.456);
        let a = report.to_csv();
        assert!(a.starts_with("# schema: turnlab-report-v1\n"));
        assert!(a.contains("3;2;1"));
        // timings never leak into artifacts
        assert!(!a.contains("123.456"));
        assert!(!report.to_json().unwrap().contains("123.456"));
        let b = report.to_csv();
        assert_eq!(a, b);
    }
}
