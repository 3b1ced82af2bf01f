//! Candidate evaluation: real training on MNIST-format data, a
//! deterministic analytic surrogate, and a content-addressed outcome
//! cache keyed by architecture digest.

mod cache;
mod mnist;
mod surrogate;
mod train;

pub use cache::{eval_cached, CachedEvaluator, EvalCache};
pub use mnist::{generate_fixture, load_idx_images, load_idx_labels, DataSplit, Dataset};
pub use surrogate::{surrogate_known_optimum, SurrogateEvaluator};
pub use train::RealEvaluator;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::SpaceError;

/// Validation profile geometry: 32 batches of 16 samples.
pub const PROFILE_BATCHES: usize = 32;
pub const PROFILE_BATCH_SIZE: usize = 16;
pub const PROFILE_SAMPLES: usize = PROFILE_BATCHES * PROFILE_BATCH_SIZE;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: expected IDX magic {want}, found {got}")]
    WrongMagic { path: String, want: u32, got: u32 },
    #[error("{path}: file truncated")]
    Truncated { path: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("need {need} samples, have {have}")]
    InsufficientSamples { need: usize, have: usize },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache entry: {0}")]
    CacheParse(#[from] serde_json::Error),
}

/// Result of evaluating one candidate architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    /// Accuracy over the whole validation split.
    pub overall_accuracy: f64,
    /// Accuracy on each of the 32 fixed validation batches of 16.
    pub batch_accuracies: Vec<f64>,
    pub train_time_s: f64,
    pub param_count: usize,
    #[serde(default)]
    pub diverged: bool,
}

impl EvalOutcome {
    pub fn profile_ok(&self) -> bool {
        self.batch_accuracies.len() == PROFILE_BATCHES
            && self
                .batch_accuracies
                .iter()
                .chain(std::iter::once(&self.overall_accuracy))
                .all(|a| (0.0..=1.0).contains(a))
    }
}

/// Training budget for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        // Fixed cheap budget so rewards stay comparable across candidates.
        // Batch 32 keeps enough optimizer steps per epoch at the
        // desk-scale 2,000-image split for even a linear head to fit.
        TrainBudget { epochs: 1, batch_size: 32, lr: 1e-3, seed: 0 }
    }
}

/// A candidate evaluator. Implementations must be deterministic for a
/// given architecture and their configured seed, and safe to call from
/// concurrent rollouts.
pub trait Evaluate: Send + Sync {
    fn evaluate(&self, arch: &crate::space::ArchSpec) -> Result<EvalOutcome, EvalError>;

    /// Number of actual (non-cached) evaluations performed so far.
    fn evaluations(&self) -> usize;
}

impl<E: Evaluate + ?Sized> Evaluate for Box<E> {
    fn evaluate(&self, arch: &crate::space::ArchSpec) -> Result<EvalOutcome, EvalError> {
        (**self).evaluate(arch)
    }

    fn evaluations(&self) -> usize {
        (**self).evaluations()
    }
}
