//! The layer-generation environment: a fixed-length sequence of IMR
//! slots as state, accuracy deltas as progressive rewards, and the three
//! stopping rules.

mod imr;

pub use imr::{ImrEncoder, IMR_DIM, IMR_INPUT};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalError, EvalOutcome, Evaluate};
use crate::space::{decode_action, ActionVector, ArchSpec, LayerSpec, MAX_LAYERS};

/// Chance-level accuracy for ten balanced classes; the reward baseline.
pub const CHANCE_ACCURACY: f64 = 0.10;
/// Reward below which adding layers counts as minimal improvement.
pub const MIN_IMPROVEMENT: f64 = 0.001;
/// Partial models below this accuracy end the episode.
pub const ACCURACY_FLOOR: f64 = 0.60;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step on a finished episode")]
    EpisodeFinished,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxLayers,
    MinImprovement,
    LowAccuracy,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::MaxLayers => "max-layers",
            StopReason::MinImprovement => "min-improvement",
            StopReason::LowAccuracy => "low-accuracy",
        })
    }
}

/// Stopping rules, checked in a fixed order after a step.
///
/// `layer_count` is the count after the step. The minimal-improvement
/// rule only applies from the second layer onward; the first layer's
/// jump from chance level is not a stopping signal.
pub fn check_stop(layer_count: usize, reward: f64, new_acc: f64) -> Option<StopReason> {
    if layer_count >= MAX_LAYERS {
        Some(StopReason::MaxLayers)
    } else if layer_count >= 2 && reward < MIN_IMPROVEMENT {
        Some(StopReason::MinImprovement)
    } else if new_acc < ACCURACY_FLOOR {
        Some(StopReason::LowAccuracy)
    } else {
        None
    }
}

/// A layer's contribution: the accuracy delta it produced.
pub fn compute_reward(prev_acc: f64, new_acc: f64) -> f64 {
    new_acc - prev_acc
}

/// Environment state: six 64-value IMR slots (zero rows beyond
/// `layer_count`), the accuracy so far, and the architecture built so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    slots: Vec<f64>,
    pub layer_count: usize,
    pub last_accuracy: f64,
    pub arch: ArchSpec,
}

impl EnvState {
    /// Blank episode start: zero slots, chance accuracy, empty stack.
    pub fn initial(input_shape: (usize, usize, usize)) -> Self {
        EnvState {
            slots: vec![0.0; MAX_LAYERS * IMR_DIM],
            layer_count: 0,
            last_accuracy: CHANCE_ACCURACY,
            arch: ArchSpec::new(input_shape),
        }
    }

    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [f64] {
        &mut self.slots
    }

    pub fn slot_row(&self, i: usize) -> &[f64] {
        &self.slots[i * IMR_DIM..(i + 1) * IMR_DIM]
    }

    /// Slot the next layer will occupy (clamped to the last slot when full).
    pub fn active_slot(&self) -> usize {
        self.layer_count.min(MAX_LAYERS - 1)
    }

    pub fn is_terminal(&self) -> bool {
        self.layer_count >= MAX_LAYERS
    }
}

/// Everything observed during one step, for logging and replay.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
pub struct StepInfo {
    pub layer: LayerSpec,
    pub eval: EvalOutcome,
    pub stop: Option<StopReason>,
}

/// The environment couples an evaluator with the frozen IMR encoder.
pub struct Environment<'a> {
    evaluator: &'a dyn Evaluate,
    encoder: &'a ImrEncoder,
    input_shape: (usize, usize, usize),
}

impl<'a> Environment<'a> {
    pub fn new(
        evaluator: &'a dyn Evaluate,
        encoder: &'a ImrEncoder,
        input_shape: (usize, usize, usize),
    ) -> Self {
        Environment { evaluator, encoder, input_shape }
    }

    /// Fresh episode: zero slots, chance-level accuracy, empty stack.
    pub fn reset(&self) -> EnvState {
        EnvState::initial(self.input_shape)
    }

    /// Decodes and legalizes the action, appends the layer, evaluates the
    /// partial model, and fills the layer's IMR slot.
    pub fn step(&self, state: &EnvState, action: &ActionVector) -> Result<StepOutcome, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::EpisodeFinished);
        }
        let layer = decode_action(action, &state.arch.current_shape());
        let mut arch = state.arch.clone();
        arch.push(layer).map_err(EvalError::from)?;
        let eval = self.evaluator.evaluate(&arch)?;
        let reward = compute_reward(state.last_accuracy, eval.overall_accuracy);
        let mut slots = state.slots.clone();
        let imr = self.encoder.encode(&action.components(), &eval.batch_accuracies);
        let slot = state.layer_count;
        slots[slot * IMR_DIM..(slot + 1) * IMR_DIM].copy_from_slice(&imr);
        let layer_count = state.layer_count + 1;
        let stop = check_stop(layer_count, reward, eval.overall_accuracy);
        Ok(StepOutcome {
            state: EnvState {
                slots,
                layer_count,
                last_accuracy: eval.overall_accuracy,
                arch,
            },
            reward,
            done: stop.is_some(),
            info: StepInfo { layer, eval, stop },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::SurrogateEvaluator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn fixture<'a>(
        sur: &'a SurrogateEvaluator,
        enc: &'a ImrEncoder,
    ) -> Environment<'a> {
        Environment::new(sur, enc, (1, 28, 28))
    }

    #[test]
    fn reset_state_is_blank() {
        let sur = SurrogateEvaluator::new(0);
        let enc = ImrEncoder::new(0);
        let env = fixture(&sur, &enc);
        let s = env.reset();
        assert!(s.slots().iter().all(|&v| v == 0.0));
        assert_eq!(s.last_accuracy, CHANCE_ACCURACY);
        assert_eq!(s.layer_count, 0);
        assert_eq!(env.reset(), s);
    }

    #[test]
    fn reward_is_accuracy_delta() {
        assert!((compute_reward(0.90, 0.95) - 0.05).abs() < 1e-15);
        assert!((compute_reward(0.10, 0.85) - 0.75).abs() < 1e-15);
        assert!((compute_reward(0.95, 0.93) + 0.02).abs() < 1e-15);
    }

    #[test]
    fn stop_rules_fire_in_order() {
        assert_eq!(check_stop(6, 0.05, 0.95), Some(StopReason::MaxLayers));
        assert_eq!(check_stop(3, 0.0005, 0.95), Some(StopReason::MinImprovement));
        assert_eq!(check_stop(2, 0.05, 0.59), Some(StopReason::LowAccuracy));
        assert_eq!(check_stop(2, 0.05, 0.95), None);
        // first layer: minimal improvement alone does not stop
        assert_eq!(check_stop(1, 0.0005, 0.95), None);
        // ordering: max-layers wins even when all three apply
        assert_eq!(check_stop(6, -0.5, 0.10), Some(StopReason::MaxLayers));
    }

    #[test]
    fn first_conv_step_earns_positive_reward() {
        let sur = SurrogateEvaluator::new(0);
        let enc = ImrEncoder::new(0);
        let env = fixture(&sur, &enc);
        let s0 = env.reset();
        let out = env.step(&s0, &ActionVector::new([0.0, 0.5, 0.0, 0.0])).unwrap();
        assert!(out.reward > 0.0);
        assert_eq!(out.state.layer_count, 1);
        // filled slot is nonzero, later slots untouched
        assert!(out.state.slot_row(0).iter().any(|&v| v != 0.0));
        for i in 1..MAX_LAYERS {
            assert!(out.state.slot_row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rewards_telescope_to_final_accuracy() {
        let sur = SurrogateEvaluator::new(0);
        let enc = ImrEncoder::new(0);
        let env = fixture(&sur, &enc);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let mut state = env.reset();
            let mut total = 0.0;
            loop {
                let action = ActionVector::new([rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
                let out = env.step(&state, &action).unwrap();
                total += out.reward;
                state = out.state;
                if out.done {
                    break;
                }
            }
            assert!((total - (state.last_accuracy - CHANCE_ACCURACY)).abs() < 1e-12);
        }
    }

    #[test]
    fn consecutive_fcls_get_negative_second_reward() {
        let sur = SurrogateEvaluator::new(0);
        let enc = ImrEncoder::new(0);
        let env = fixture(&sur, &enc);
        let conv = ActionVector::new([0.0, 0.5, 0.0, 0.0]);
        let fcl = ActionVector::new([0.5, 0.5, 1.0, 0.2]);
        let s0 = env.reset();
        let s1 = env.step(&s0, &conv).unwrap();
        let s2 = env.step(&s1.state, &fcl).unwrap();
        assert!(s2.reward > 0.0);
        let s3 = env.step(&s2.state, &fcl).unwrap();
        assert!(s3.reward < 0.0, "second consecutive FCL reward {}", s3.reward);
        assert!(s3.done);
        assert_eq!(s3.info.stop, Some(StopReason::MinImprovement));
    }

    #[test]
    fn step_on_finished_episode_is_an_error() {
        let sur = SurrogateEvaluator::new(0);
        let enc = ImrEncoder::new(0);
        let env = fixture(&sur, &enc);
        let mut state = env.reset();
        state.layer_count = MAX_LAYERS;
        assert!(matches!(
            env.step(&state, &ActionVector::new([0.0; 4])),
            Err(EnvError::EpisodeFinished)
        ));
    }
}
