//! Orchestration, structured logging, and post-run analytics.

mod config;
mod log;
mod reports;
mod search;

pub use config::{EvalMode, RunConfig};
pub use log::{read_log, LogWriter, Phase, RunRecord, LOG_VERSION};
pub use reports::{
    export_reports, metric_acctime, report_attention_diff, report_layer_affinity, AcctimeReport,
    AffinityEntry, AttentionDiffReport, ExportedPaths, ATTN_BINS, INSUFFICIENT_DATA,
    NO_MODELS_IN_BUDGET, START_SENTINEL,
};
pub use search::{
    build_evaluator, random_policy_returns, run_search, BestModel, RunSummary, BEST_MODELS_FILE,
    CACHE_FILE, CHECKPOINT_FILE, LOG_FILE,
};

use thiserror::Error;

use crate::agent::ControllerError;
use crate::eval::EvalError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("environment: {0}")]
    Env(String),
    #[error("real mode needs a dataset directory (set dataset_dir or MNIST_DIR)")]
    MissingDataset,
}
