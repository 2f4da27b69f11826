//! Experiment driver: single runs, paired baseline/retro runs, sweeps,
//! scalar analysis reports and metric files.

mod analyze;
mod config;
mod metrics;
mod paired;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use analyze::{analyze, analyze_report, autodiff_scalar_grad, AnalysisReport, GradRow, MinimizerRow, ProbeRow, GRID_STEP};
pub use config::{DatasetSpec, RunConfig};
pub use metrics::{
    arm_dir, emit_paired, emit_run, emit_sweep, PairSummary, RunSummary, SeedDelta, EVAL_HEADER, STEPS_HEADER,
};
pub use paired::{
    mean_std, run_paired, run_paired_on, sweep, sweep_on, PairAggregate, PairedResult, SeedPair, SweepAxis, SweepCell,
    SweepTable,
};
pub use train::{
    derive_seed, error_rate, train_on, train_one, EvalRow, RunRecord, RunStatus, StepRow, Trainer, STREAM_BATCHES,
    STREAM_GUIDANCE, STREAM_INIT,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: csv: {1}")]
    Csv(PathBuf, String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Optim(#[from] crate::optim::OptimError),
    #[error(transparent)]
    Retro(#[from] crate::retro::RetroError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
