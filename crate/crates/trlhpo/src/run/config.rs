//! Run configuration: every knob of a search run, serialized into the
//! log header so any run can be reproduced from its log alone.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agent::DdpgConfig;
use crate::eval::TrainBudget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Train every candidate on the dataset.
    Real,
    /// Analytic surrogate scoring; no dataset needed.
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: EvalMode,
    /// Directory with the IDX files; falls back to the MNIST_DIR
    /// environment variable when unset.
    pub dataset_dir: Option<PathBuf>,
    pub train_size: usize,
    pub val_size: usize,
    /// Per-candidate training budget (real mode).
    pub budget: TrainBudget,
    pub episodes: usize,
    /// Concurrent rollouts per episode.
    pub models_per_episode: usize,
    /// Optimization rounds per episode once the buffer can fill a batch.
    pub opt_rounds_per_episode: usize,
    /// Episodes with exploration noise and buffer writes; the remainder
    /// run the deterministic policy against the frozen buffer.
    pub exploration_episodes: usize,
    pub controller: DdpgConfig,
    /// Initial exploration noise, decayed multiplicatively per episode.
    pub noise_sigma: f64,
    pub noise_decay: f64,
    /// Minimum buffered transitions before optimization rounds start.
    pub update_start: usize,
    pub seed: u64,
    pub wallclock_budget_s: Option<f64>,
    pub output_dir: PathBuf,
    /// Cache evaluation outcomes by architecture digest.
    pub cache: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let controller = DdpgConfig::default();
        RunConfig {
            mode: EvalMode::Surrogate,
            dataset_dir: None,
            train_size: 2_000,
            val_size: 512,
            budget: TrainBudget::default(),
            episodes: 50,
            models_per_episode: 10,
            opt_rounds_per_episode: 5,
            exploration_episodes: 40,
            update_start: controller.batch_size,
            controller,
            noise_sigma: 0.2,
            noise_decay: 0.99,
            seed: 0,
            wallclock_budget_s: None,
            output_dir: PathBuf::from("runs/out"),
            cache: true,
        }
    }
}

impl RunConfig {
    /// Full-size configuration: 20,000 training and 10,000 validation
    /// images, real training for every candidate.
    pub fn paper_scale() -> Self {
        RunConfig {
            mode: EvalMode::Real,
            train_size: 20_000,
            val_size: 10_000,
            ..RunConfig::default()
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, super::RunError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (1, 28, 28)
    }
}
