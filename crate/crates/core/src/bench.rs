//! Scripted desk-scale benchmark harness.
//!
//! A manifest (TOML) lists experiment entries, one per acceptance criterion;
//! each names a check, its tolerance, seeds where applicable, and a runtime
//! budget. Thresholds live in the manifest, not in code, so tolerance
//! changes are reviewable data edits. Entries run sequentially and failures
//! do not stop the run.

use crate::checks::{
    self, CheckReport, ARM_DROPBLOCK_GSNR, ARM_DROPBLOCK_META, ARM_DROPBLOCK_RANDOM,
    ARM_DROPOUT_GSNR, ARM_DROPOUT_RANDOM, ARM_PROBE_BASELINE, ARM_PROBE_DROPOUT_GSNR,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    /// Experiment identifier, unique within the manifest.
    pub id: String,
    /// Which check to run; see [`run_entry`] for the known names.
    pub check: String,
    /// Optional run-config file for experiment-style entries.
    #[serde(default)]
    pub config: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Human-readable statement of the property being checked.
    pub expected: String,
    pub tolerance: f64,
    pub max_runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchManifest {
    #[serde(default, rename = "entry")]
    pub entries: Vec<BenchEntry>,
}

impl BenchManifest {
    pub fn from_file(path: &Path) -> Result<BenchManifest> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub id: String,
    pub passed: bool,
    pub measured: String,
    pub elapsed_secs: f64,
    pub within_budget: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed && r.within_budget && r.error.is_none())
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<28} {:<6} {:>9}  {}\n",
            "entry", "status", "secs", "measured"
        );
        for r in &self.rows {
            let status = if r.error.is_some() {
                "ERROR"
            } else if r.passed && r.within_budget {
                "pass"
            } else {
                "FAIL"
            };
            out.push_str(&format!(
                "{:<28} {:<6} {:>9.1}  {}\n",
                r.id,
                status,
                r.elapsed_secs,
                r.error.as_deref().unwrap_or(&r.measured)
            ));
        }
        out
    }
}

fn default_seeds(seeds: &[u64]) -> Vec<u64> {
    if seeds.is_empty() {
        vec![0, 1, 2, 3, 4]
    } else {
        seeds.to_vec()
    }
}

/// Execute one manifest entry.
pub fn run_entry(entry: &BenchEntry) -> Result<CheckReport> {
    let tol = entry.tolerance;
    let seeds = default_seeds(&entry.seeds);
    match entry.check.as_str() {
        "autodiff-fd" => checks::check_autodiff(tol, 1e-5),
        "gsnr-oracle" => checks::check_gsnr_oracle(50, tol),
        "mask-invariants" => checks::check_mask_invariants(tol),
        "soft-gate-fd" => checks::check_soft_gate_fd(20, tol),
        "meta-collapse" => checks::check_meta_collapse(tol),
        "directional-dg" => {
            let results = checks::run_matrix(
                &[
                    ARM_DROPOUT_RANDOM,
                    ARM_DROPOUT_GSNR,
                    ARM_DROPBLOCK_RANDOM,
                    ARM_DROPBLOCK_GSNR,
                ],
                &[0, 1, 2, 3],
                &seeds,
            )?;
            Ok(checks::check_directional(&results))
        }
        "meta-vs-fixed" => {
            let results =
                checks::run_matrix(&[ARM_DROPBLOCK_GSNR, ARM_DROPBLOCK_META], &[0, 1, 2, 3], &seeds)?;
            Ok(checks::check_meta_vs_fixed(&results))
        }
        "gsnr-over-time" => {
            let results =
                checks::run_matrix(&[ARM_PROBE_BASELINE, ARM_PROBE_DROPOUT_GSNR], &[0], &seeds)?;
            Ok(checks::check_gsnr_over_time(&results, 0, 4))
        }
        "stiffness" => checks::check_stiffness(tol),
        "determinism-persistence" => {
            let dir = std::env::temp_dir().join(format!(
                "metagsnr-bench-{}-{}",
                std::process::id(),
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_nanos())
                    .unwrap_or(0)
            ));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let report = checks::check_determinism(&dir);
            let _ = std::fs::remove_dir_all(&dir);
            report
        }
        other => Err(Error::InvalidArg(format!("unknown check `{other}`"))),
    }
}

/// Run every entry, continuing past failures, and collect the report.
pub fn run_bench(manifest: &BenchManifest) -> BenchReport {
    let mut rows = Vec::new();
    for entry in &manifest.entries {
        let start = Instant::now();
        let outcome = run_entry(entry);
        let elapsed = start.elapsed().as_secs_f64();
        let within = elapsed <= entry.max_runtime_secs;
        match outcome {
            Ok(report) => rows.push(BenchRow {
                id: entry.id.clone(),
                passed: report.passed,
                measured: report.measured,
                elapsed_secs: elapsed,
                within_budget: within,
                error: None,
            }),
            Err(e) => rows.push(BenchRow {
                id: entry.id.clone(),
                passed: false,
                measured: String::new(),
                elapsed_secs: elapsed,
                within_budget: within,
                error: Some(e.to_string()),
            }),
        }
    }
    BenchReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_passes_trivially() {
        let report = run_bench(&BenchManifest::default());
        assert!(report.rows.is_empty());
        assert!(report.all_passed());
    }

    #[test]
    fn broken_tolerance_reports_fail_with_measured_value() {
        let entry = BenchEntry {
            id: "gsnr-broken".into(),
            check: "gsnr-oracle".into(),
            config: None,
            seeds: vec![],
            expected: "deliberately impossible".into(),
            tolerance: 0.0,
            max_runtime_secs: 60.0,
        };
        let report = run_bench(&BenchManifest {
            entries: vec![entry],
        });
        assert!(!report.rows[0].passed);
        assert!(report.rows[0].measured.contains("worst abs error"));
        assert!(report.table().contains("FAIL"));
    }

    #[test]
    fn unknown_check_recorded_not_fatal() {
        let entry = BenchEntry {
            id: "bogus".into(),
            check: "no-such-check".into(),
            config: None,
            seeds: vec![],
            expected: "n/a".into(),
            tolerance: 1.0,
            max_runtime_secs: 1.0,
        };
        let report = run_bench(&BenchManifest {
            entries: vec![entry],
        });
        assert!(report.rows[0].error.is_some());
        assert!(!report.all_passed());
    }

    #[test]
    fn manifest_round_trips() {
        let m = BenchManifest {
            entries: vec![BenchEntry {
                id: "a".into(),
                check: "stiffness".into(),
                config: None,
                seeds: vec![1, 2],
                expected: "in range".into(),
                tolerance: 1e-12,
                max_runtime_secs: 10.0,
            }],
        };
        let text = toml::to_string(&m).unwrap();
        let back: BenchManifest = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
