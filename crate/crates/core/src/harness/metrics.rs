use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, PairAggregate, PairedResult, RunConfig, RunRecord, RunStatus, SweepAxis, SweepTable};

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub config_digest: String,
    pub seed: u64,
    pub status: RunStatus,
    pub step_count: usize,
    pub final_test_error: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub final_train_error: Option<f64>,
    pub refresh_steps: Vec<u64>,
    pub duration_secs: f64,
}

impl From<&RunRecord> for RunSummary {
    fn from(r: &RunRecord) -> Self {
        Self {
            config: r.config.clone(),
            config_digest: r.config_digest.clone(),
            seed: r.seed,
            status: r.status.clone(),
            step_count: r.steps.len(),
            final_test_error: r.final_test_error,
            final_test_accuracy: r.final_test_error.map(|e| 1.0 - e),
            final_train_error: r.final_train_error,
            refresh_steps: r.refresh_steps.clone(),
            duration_secs: r.duration_secs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub baseline_final_error: Option<f64>,
    pub retro_final_error: Option<f64>,
    pub delta: Option<f64>,
    pub error: Option<String>,
}

/// Contents of `pair_summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub config: RunConfig,
    pub seeds: Vec<SeedDelta>,
    pub aggregate: PairAggregate,
}

impl From<&PairedResult> for PairSummary {
    fn from(p: &PairedResult) -> Self {
        Self {
            config: p.config.clone(),
            seeds: p
                .pairs
                .iter()
                .map(|s| SeedDelta {
                    seed: s.seed,
                    baseline_final_error: s.baseline.as_ref().and_then(|r| r.final_test_error),
                    retro_final_error: s.retro.as_ref().and_then(|r| r.final_test_error),
                    delta: s.delta,
                    error: s.error.clone(),
                })
                .collect(),
            aggregate: p.aggregate.clone(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Csv(path.to_path_buf(), e.to_string()))?;
    let csv_err = |e: csv::Error| HarnessError::Csv(path.to_path_buf(), e.to_string());
    if rows.is_empty() {
        w.write_record(header).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("summaries always serialize");
    fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

pub const STEPS_HEADER: [&str; 6] = ["step", "epoch", "task_loss", "retro_loss", "total_loss", "alpha"];
pub const EVAL_HEADER: [&str; 3] = ["step", "test_error", "test_accuracy"];

/// Writes `steps.csv`, `eval.csv` and `summary.json` into `dir`.
pub fn emit_run(record: &RunRecord, dir: &Path) -> Result<(), HarnessError> {
    create_dir(dir)?;
    write_csv(&dir.join("steps.csv"), &record.steps, &STEPS_HEADER)?;
    write_csv(&dir.join("eval.csv"), &record.evals, &EVAL_HEADER)?;
    write_json(&dir.join("summary.json"), &RunSummary::from(record))
}

/// Directory of one arm inside a paired output tree.
pub fn arm_dir(root: &Path, seed: u64, retro: bool) -> PathBuf {
    root.join(format!("seed_{seed}")).join(if retro { "retro" } else { "baseline" })
}

/// Every arm under `seed_<s>/{baseline,retro}/` plus `pair_summary.json`.
pub fn emit_paired(result: &PairedResult, dir: &Path) -> Result<(), HarnessError> {
    create_dir(dir)?;
    for p in &result.pairs {
        if let Some(b) = &p.baseline {
            emit_run(b, &arm_dir(dir, p.seed, false))?;
        }
        if let Some(r) = &p.retro {
            emit_run(r, &arm_dir(dir, p.seed, true))?;
        }
    }
    write_json(&dir.join("pair_summary.json"), &PairSummary::from(result))
}

#[derive(Serialize)]
struct SweepRow<'a> {
    axis: SweepAxis,
    value: &'a str,
    completed: Option<usize>,
    failed: Option<usize>,
    baseline_mean: Option<f64>,
    baseline_std: Option<f64>,
    retro_mean: Option<f64>,
    retro_std: Option<f64>,
    delta_mean: Option<f64>,
    retro_wins: Option<usize>,
    error: Option<&'a str>,
}

/// `sweep.csv` keyed by axis value, plus one paired tree per value.
pub fn emit_sweep(table: &SweepTable, dir: &Path) -> Result<(), HarnessError> {
    create_dir(dir)?;
    let mut rows = Vec::new();
    for cell in &table.cells {
        let a = cell.result.as_ref().map(|r| &r.aggregate);
        if let Some(r) = &cell.result {
            emit_paired(r, &dir.join(format!("{}={}", table.axis, cell.value)))?;
        }
        rows.push(SweepRow {
            axis: table.axis,
            value: &cell.value,
            completed: a.map(|a| a.completed),
            failed: a.map(|a| a.failed),
            baseline_mean: a.map(|a| a.baseline_mean),
            baseline_std: a.map(|a| a.baseline_std),
            retro_mean: a.map(|a| a.retro_mean),
            retro_std: a.map(|a| a.retro_std),
            delta_mean: a.map(|a| a.delta_mean),
            retro_wins: a.map(|a| a.retro_wins),
            error: cell.error.as_deref(),
        });
    }
    write_csv(&dir.join("sweep.csv"), &rows, &[])
}
