//! Experiment orchestration: configuration, the training loop, evaluation,
//! sweeps, the paired discrepancy ablation, and report bundles. The CLI
//! binary is a thin wrapper over these entry points.

pub mod config;
mod data;
mod eval;
mod generate;
mod report;
mod step;
mod sweep;
mod train;
mod verify;

pub use config::{
    apply_overrides, config_hash, load_config, override_all_seeds, ExperimentConfig,
};
pub use eval::{cmd_eval, EpochSummary, EvalOutcome, ExperimentReport};
pub use generate::{cmd_generate, GenerateOutcome};
pub use report::{cmd_report, ReportBundle};
pub use sweep::{cmd_sweep, run_discrepancy_ablation, AblationReport, SweepRow, SweepTable};
pub use train::{cmd_train, TrainOutcome};
pub use verify::{composite_gradient_check, GradCheckReport, GradProbe};

use std::path::PathBuf;
use thiserror::Error;

pub type PipeResult<T> = Result<T, PipelineError>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data2(String),
    #[error(transparent)]
    Data(#[from] crate::datamodel::DataError),
    #[error(transparent)]
    Vae(#[from] crate::vae::VaeError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Discrepancy(#[from] crate::discrepancy::DiscrepancyError),
    #[error(transparent)]
    Cluster(#[from] crate::clustering::ClusterError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at step {step}; last good step {last_good_step:?}")]
    NumericAbort {
        step: u64,
        last_good_step: Option<u64>,
    },
}

impl PipelineError {
    /// CLI exit code: 1 usage/config, 2 runtime/data, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::NumericAbort { .. } => 3,
            _ => 2,
        }
    }
}
