//! Named experiments, their machine-readable summaries, and the report
//! aggregator.

mod attention;
mod guidance;
mod spectral;
mod surgery;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::pipeline::Bench;

/// One thresholded measurement inside a summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable threshold, e.g. "<= 0.02".
    pub threshold: String,
    pub pass: bool,
}

impl Check {
    pub fn le(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold: format!("<= {limit}"),
            pass: value <= limit,
        }
    }

    pub fn ge(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold: format!(">= {limit}"),
            pass: value >= limit,
        }
    }

    pub fn gt(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold: format!("> {limit}"),
            pass: value > limit,
        }
    }

    pub fn within(name: &str, value: f64, lo: f64, hi: f64) -> Self {
        Check {
            name: name.into(),
            value,
            threshold: format!("in [{lo}, {hi}]"),
            pass: (lo..=hi).contains(&value),
        }
    }

    pub fn flag(name: &str, pass: bool) -> Self {
        Check {
            name: name.into(),
            value: pass as u8 as f64,
            threshold: "== 1".into(),
            pass,
        }
    }
}

/// Machine-readable outcome of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub seed: u64,
    /// PASS if every check passed (informational notes do not count).
    pub status: String,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Summary {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Summary {
            experiment: experiment.into(),
            seed,
            status: "PASS".into(),
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, check: Check) {
        if !check.pass {
            self.status = "FAIL".into();
        }
        self.checks.push(check);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(self).map_err(|e| LabError::data(e.to_string()))?,
        )?;
        Ok(())
    }

    pub fn passed(&self) -> bool {
        self.status == "PASS"
    }
}

/// All experiment names, in the order the report lists them.
pub const EXPERIMENTS: [&str; 13] = [
    "prop1",
    "spectrum",
    "attn-f1",
    "token-weights",
    "eos-switch",
    "eos-window",
    "text-window",
    "drop-guidance",
    "eos-count",
    "sos-only",
    "zero-rand",
    "kv-sub",
    "gap-norms",
];

/// Runs one named experiment, writing its artifacts, a copy of the config,
/// and `summary.json` into the config's output directory.
pub fn run_experiment(name: &str, config: ExperimentConfig) -> Result<Summary> {
    if !EXPERIMENTS.contains(&name) {
        return Err(LabError::usage(format!(
            "unknown experiment '{name}'; expected one of {}",
            EXPERIMENTS.join(", ")
        )));
    }
    let out_dir = config.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    config.write_copy(&out_dir)?;
    let bench = Bench::new(config)?;

    let summary = match name {
        "prop1" => spectral::prop1(&bench, &out_dir)?,
        "spectrum" => spectral::spectrum(&bench, &out_dir)?,
        "attn-f1" => attention::attn_f1(&bench, &out_dir)?,
        "token-weights" => attention::token_weights(&bench, &out_dir)?,
        "gap-norms" => attention::gap_norms(&bench, &out_dir)?,
        "eos-switch" => surgery::eos_switch(&bench, &out_dir)?,
        "eos-window" => surgery::eos_window(&bench, &out_dir)?,
        "eos-count" => surgery::eos_count(&bench, &out_dir)?,
        "sos-only" => surgery::sos_only(&bench, &out_dir)?,
        "zero-rand" => surgery::zero_rand(&bench, &out_dir)?,
        "kv-sub" => surgery::kv_sub(&bench, &out_dir)?,
        "text-window" => guidance::text_window(&bench, &out_dir)?,
        "drop-guidance" => guidance::drop_guidance(&bench, &out_dir)?,
        _ => unreachable!("name membership checked above"),
    };
    summary.write(&out_dir)?;
    Ok(summary)
}

/// Aggregates run summaries into one structured-text report with pass/fail
/// lines per check. Missing summaries are listed as warnings, not errors.
pub fn write_report(run_dirs: &[PathBuf], out_path: &Path) -> Result<String> {
    let mut sections = Vec::new();
    let mut warnings = Vec::new();
    for dir in run_dirs {
        let path = dir.join("summary.json");
        match std::fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str::<Summary>(&text) {
                Ok(summary) => sections.push(summary),
                Err(e) => warnings.push(format!("{}: unreadable summary ({e})", dir.display())),
            },
            Err(_) => warnings.push(format!("{}: no summary.json", dir.display())),
        }
    }

    let failing: Vec<String> = sections
        .iter()
        .filter(|s| !s.passed())
        .flat_map(|s| {
            s.checks
                .iter()
                .filter(|c| !c.pass)
                .map(move |c| format!("{}:{}", s.experiment, c.name))
        })
        .collect();
    let status = if sections.is_empty() {
        "EMPTY"
    } else if failing.is_empty() {
        "PASS"
    } else {
        "FAIL"
    };

    let mut text = String::new();
    text.push_str("guidance lab report\n===================\n");
    text.push_str(&format!("status: {status}\n"));
    if !failing.is_empty() {
        text.push_str(&format!("failing: {}\n", failing.join(", ")));
    }
    if sections.is_empty() {
        text.push_str("warning: no run summaries found\n");
    }
    for warning in &warnings {
        text.push_str(&format!("warning: {warning}\n"));
    }
    for s in &sections {
        text.push_str(&format!("\n[{}] {} (seed {})\n", s.experiment, s.status, s.seed));
        for c in &s.checks {
            text.push_str(&format!(
                "  {} {} = {} ({})\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.threshold
            ));
        }
        for note in &s.notes {
            text.push_str(&format!("  note: {note}\n"));
        }
    }

    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_path, &text)?;
    Ok(text)
}

/// Spearman rank correlation with average ranks for ties.
pub(crate) fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |values: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
        let mut ranks = vec![0.0; values.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(x);
    let ry = rank(y);
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    num / (dx * dy).sqrt()
}

/// Least-squares slope of `ln(y)` against `ln(x)`.
pub(crate) fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in lx.iter().zip(&ly) {
        num += (a - mx) * (b - my);
        den += (a - mx) * (a - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_of_monotone_data_is_one() {
        let x = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0];
        let y = [0.0, 0.1, 0.3, 0.6, 0.7, 0.9];
        assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
        let y_rev: Vec<f64> = y.iter().rev().cloned().collect();
        assert!((spearman(&x, &y_rev) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_log_slope_recovers_a_power_law() {
        let x = [64.0, 256.0, 1024.0, 4096.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 / v).collect();
        assert!((log_log_slope(&x, &y) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_experiment_is_a_usage_error() {
        let err = run_experiment("warp-drive", ExperimentConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn report_aggregates_and_names_failures() {
        let dir = tempfile::tempdir().unwrap();
        let run_a = dir.path().join("a");
        let run_b = dir.path().join("b");
        std::fs::create_dir_all(&run_a).unwrap();
        std::fs::create_dir_all(&run_b).unwrap();

        let mut ok = Summary::new("prop1", 1);
        ok.push(Check::le("violation_rate", 0.01, 0.05));
        ok.write(&run_a).unwrap();

        let mut bad = Summary::new("drop-guidance", 1);
        bad.push(Check::ge("spearman_l1", 0.5, 0.9));
        bad.write(&run_b).unwrap();

        let out = dir.path().join("report.txt");
        let text = write_report(&[run_a.clone(), run_b.clone()], &out).unwrap();
        assert!(text.contains("status: FAIL"));
        assert!(text.contains("drop-guidance:spearman_l1"));

        let text = write_report(&[run_a], &out).unwrap();
        assert!(text.contains("status: PASS"));

        let text = write_report(&[dir.path().join("missing")], &out).unwrap();
        assert!(text.contains("status: EMPTY"));
        assert!(text.contains("warning"));
    }
}
