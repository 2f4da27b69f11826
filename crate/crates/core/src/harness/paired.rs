use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_on, HarnessError, RunConfig, RunRecord};
use crate::data::Dataset;
use crate::optim::OptimizerKind;
use crate::retro::Norm;
use crate::scalar::Scalar;

/// Both arms for one seed. `error` is set when either arm failed or aborted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPair {
    pub seed: u64,
    pub baseline: Option<RunRecord>,
    pub retro: Option<RunRecord>,
    /// `retro_final_error − baseline_final_error`.
    pub delta: Option<f64>,
    pub error: Option<String>,
}

/// Statistics over the seeds where both arms completed. Standard
/// deviations use the `n − 1` denominator and are 0 for a single seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAggregate {
    pub completed: usize,
    pub failed: usize,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub retro_mean: f64,
    pub retro_std: f64,
    pub delta_mean: f64,
    /// Seeds where the retro arm's final test error is strictly lower.
    pub retro_wins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub config: RunConfig,
    pub pairs: Vec<SeedPair>,
    pub aggregate: PairAggregate,
}

impl PairedResult {
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.pairs.iter().flat_map(|p| p.baseline.iter().chain(p.retro.iter()))
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.pairs.iter().filter_map(|p| p.delta).collect()
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(pairs: &[SeedPair]) -> PairAggregate {
    let done: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|p| p.error.is_none())
        .filter_map(|p| Some((p.baseline.as_ref()?.final_test_error?, p.retro.as_ref()?.final_test_error?)))
        .collect();
    let base: Vec<f64> = done.iter().map(|d| d.0).collect();
    let retro: Vec<f64> = done.iter().map(|d| d.1).collect();
    let deltas: Vec<f64> = done.iter().map(|d| d.1 - d.0).collect();
    let (baseline_mean, baseline_std) = mean_std(&base);
    let (retro_mean, retro_std) = mean_std(&retro);
    PairAggregate {
        completed: done.len(),
        failed: pairs.len() - done.len(),
        baseline_mean,
        baseline_std,
        retro_mean,
        retro_std,
        delta_mean: mean_std(&deltas).0,
        retro_wins: done.iter().filter(|d| d.1 < d.0).count(),
    }
}

/// Baseline (retro disabled) and retro arms for every seed, sharing
/// initialization and batch order per seed. Runs execute in parallel;
/// results are in seed order.
pub fn run_paired_on<S: Scalar>(
    config: &RunConfig,
    seeds: &[u64],
    train: &Dataset<S>,
    test: &Dataset<S>,
) -> Result<PairedResult, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Config("run_paired needs at least one seed".into()));
    }
    config.validate()?;
    let jobs: Vec<(u64, bool)> = seeds.iter().flat_map(|&s| [(s, false), (s, true)]).collect();
    let runs: Vec<Result<RunRecord, HarnessError>> = jobs
        .par_iter()
        .map(|&(seed, enabled)| train_on(&config.with_seed(seed).with_retro_enabled(enabled), train, test))
        .collect();

    let mut pairs = Vec::with_capacity(seeds.len());
    let mut runs = runs.into_iter();
    for &seed in seeds {
        let (b, r) = (runs.next().expect("two runs per seed"), runs.next().expect("two runs per seed"));
        let mut errors = Vec::new();
        for (arm, run) in [("baseline", &b), ("retro", &r)] {
            match run {
                Err(e) => errors.push(format!("{arm}: {e}")),
                Ok(rec) if !rec.is_completed() => errors.push(format!("{arm}: {:?}", rec.status)),
                Ok(_) => {}
            }
        }
        let baseline = b.ok();
        let retro = r.ok();
        let delta = match (&baseline, &retro) {
            (Some(b), Some(r)) if errors.is_empty() => r.final_test_error.zip(b.final_test_error).map(|(r, b)| r - b),
            _ => None,
        };
        pairs.push(SeedPair {
            seed,
            baseline,
            retro,
            delta,
            error: (!errors.is_empty()).then(|| errors.join("; ")),
        });
    }
    Ok(PairedResult {
        config: config.clone(),
        aggregate: aggregate(&pairs),
        pairs,
    })
}

pub fn run_paired(config: &RunConfig, seeds: &[u64], base_dir: &Path) -> Result<PairedResult, HarnessError> {
    let (train, test) = config.dataset.load::<f64>(base_dir)?;
    run_paired_on(config, seeds, &train, &test)
}

/// Hyperparameter varied by [`sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BatchSize,
    Optimizer,
    Frequency,
    Warmup,
    Norm,
    Kappa,
    MomentumParam,
}

impl std::str::FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "batch_size" => Self::BatchSize,
            "optimizer" => Self::Optimizer,
            "frequency" => Self::Frequency,
            "warmup" => Self::Warmup,
            "norm" => Self::Norm,
            "kappa" => Self::Kappa,
            "momentum_param" => Self::MomentumParam,
            other => return Err(HarnessError::Config(format!("unknown sweep axis `{other}`"))),
        })
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BatchSize => "batch_size",
            Self::Optimizer => "optimizer",
            Self::Frequency => "frequency",
            Self::Warmup => "warmup",
            Self::Norm => "norm",
            Self::Kappa => "kappa",
            Self::MomentumParam => "momentum_param",
        })
    }
}

impl SweepAxis {
    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig, HarnessError> {
        let bad = |e: String| HarnessError::Config(format!("{self} value `{value}`: {e}"));
        let mut c = base.clone();
        match self {
            Self::BatchSize => c.batch_size = value.parse().map_err(|e| bad(format!("{e}")))?,
            Self::Optimizer => c.optimizer.kind = value.parse::<OptimizerKind>().map_err(|e| bad(e.to_string()))?,
            Self::Frequency => c.retro.update_frequency_steps = value.parse().map_err(|e| bad(format!("{e}")))?,
            Self::Warmup => c.retro.warmup_steps = value.parse().map_err(|e| bad(format!("{e}")))?,
            Self::Norm => c.retro.norm = value.parse::<Norm>().map_err(|e| bad(e.to_string()))?,
            Self::Kappa => c.retro.kappa = value.parse().map_err(|e| bad(format!("{e}")))?,
            Self::MomentumParam => c.optimizer.momentum = value.parse().map_err(|e| bad(format!("{e}")))?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub result: Option<PairedResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

/// One paired experiment per axis value. Invalid values and failed cells
/// are recorded in the table rather than aborting the sweep.
pub fn sweep_on<S: Scalar>(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    train: &Dataset<S>,
    test: &Dataset<S>,
) -> Result<SweepTable, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one seed".into()));
    }
    let cells = values
        .iter()
        .map(|v| match axis.apply(base, v).and_then(|c| run_paired_on(&c, seeds, train, test)) {
            Ok(r) => SweepCell {
                value: v.clone(),
                result: Some(r),
                error: None,
            },
            Err(e) => SweepCell {
                value: v.clone(),
                result: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(SweepTable {
        axis,
        seeds: seeds.to_vec(),
        cells,
    })
}

pub fn sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    base_dir: &Path,
) -> Result<SweepTable, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let (train, test) = base.dataset.load::<f64>(base_dir)?;
    sweep_on(base, axis, values, seeds, &train, &test)
}
