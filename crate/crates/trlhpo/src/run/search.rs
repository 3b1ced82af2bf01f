//! Search orchestration: concurrent rollout phases feeding the replay
//! buffer, optimization rounds at the phase barrier, and exploitation
//! episodes with the noise turned off.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Instant, SystemTime};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::config::{EvalMode, RunConfig};
use super::log::{LogWriter, Phase, RunRecord, LOG_VERSION};
use super::RunError;
use crate::agent::{DdpgAgent, DdpgConfig, ReplayBuffer, Transition};
use crate::env::{EnvState, Environment, ImrEncoder};
use crate::eval::{
    CachedEvaluator, Dataset, EvalCache, Evaluate, RealEvaluator, SurrogateEvaluator, TrainBudget,
};
use crate::space::ActionVector;
use crate::util::derive_seed;

pub const LOG_FILE: &str = "run_log.jsonl";
pub const CACHE_FILE: &str = "eval_cache.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const BEST_MODELS_FILE: &str = "best_models.json";

/// One completed candidate, as reported in summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestModel {
    pub digest: String,
    pub accuracy: f64,
    pub layers: usize,
    pub param_count: usize,
    pub t_s: f64,
    pub arch_json: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub episodes_run: usize,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub best_models: Vec<BestModel>,
    pub exploration_mean_return: Option<f64>,
    pub exploitation_mean_return: Option<f64>,
    pub evaluations: usize,
    pub buffer_appended: usize,
    pub wallclock_s: f64,
}

/// Builds the evaluator a config asks for.
pub fn build_evaluator(config: &RunConfig) -> Result<Box<dyn Evaluate>, RunError> {
    let inner: Box<dyn Evaluate> = match config.mode {
        EvalMode::Surrogate => {
            Box::new(SurrogateEvaluator::new(derive_seed(config.seed, &["surrogate"])))
        }
        EvalMode::Real => {
            let dir = config
                .dataset_dir
                .clone()
                .or_else(|| std::env::var_os("MNIST_DIR").map(PathBuf::from))
                .ok_or(RunError::MissingDataset)?;
            let dataset = Dataset::load(
                &dir,
                config.train_size,
                config.val_size,
                derive_seed(config.seed, &["data-split"]),
            )?;
            let budget = TrainBudget {
                seed: derive_seed(config.seed, &["candidate-train"]),
                ..config.budget
            };
            Box::new(RealEvaluator::new(
                Arc::new(dataset),
                budget,
                derive_seed(config.seed, &["profile"]),
            )?)
        }
    };
    if config.cache {
        let cache_path = config.output_dir.join(CACHE_FILE);
        let cache = EvalCache::open(&cache_path)?;
        Ok(Box::new(CachedEvaluator::new(inner, cache)))
    } else {
        Ok(inner)
    }
}

struct RolloutOutput {
    records: Vec<RunRecord>,
    transitions: Vec<Transition>,
    episode_return: f64,
    final_accuracy: f64,
}

fn run_rollout(
    env: &Environment,
    agent: &DdpgAgent,
    episode: usize,
    rollout: usize,
    phase: Phase,
    sigma: f64,
    seed: u64,
    start: Instant,
) -> RolloutOutput {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut state = env.reset();
    let mut records = Vec::new();
    let mut transitions = Vec::new();
    let mut episode_return = 0.0;
    let mut step = 0usize;
    loop {
        let acting_slot = state.active_slot();
        let (action, attn) = agent.select_action(&state, sigma, &mut rng);
        let out = match env.step(&state, &action) {
            Ok(out) => out,
            Err(e) => {
                records.push(RunRecord::Incident {
                    episode,
                    rollout,
                    message: e.to_string(),
                    t_s: start.elapsed().as_secs_f64(),
                });
                return RolloutOutput {
                    records,
                    transitions: Vec::new(),
                    episode_return,
                    final_accuracy: state.last_accuracy,
                };
            }
        };
        episode_return += out.reward;
        records.push(RunRecord::Step {
            episode,
            rollout,
            step,
            phase,
            layer: out.info.layer,
            arch_digest: out.state.arch.digest(),
            action: action.components(),
            reward: out.reward,
            overall_accuracy: out.info.eval.overall_accuracy,
            batch_accuracies: out.info.eval.batch_accuracies.clone(),
            attention: attn.head_avg_row(acting_slot),
            stop: out.info.stop,
            t_s: start.elapsed().as_secs_f64(),
        });
        transitions.push(Transition {
            state: state.clone(),
            action,
            reward: out.reward,
            next_state: out.state.clone(),
            done: out.done,
        });
        let done = out.done;
        let param_count = out.info.eval.param_count;
        state = out.state;
        step += 1;
        if done {
            records.push(RunRecord::Model {
                episode,
                rollout,
                phase,
                arch_json: state.arch.canonical_json(),
                arch_digest: state.arch.digest(),
                accuracy: state.last_accuracy,
                layers: state.arch.len(),
                param_count,
                t_s: start.elapsed().as_secs_f64(),
            });
            return RolloutOutput {
                records,
                transitions,
                episode_return,
                final_accuracy: state.last_accuracy,
            };
        }
    }
}

/// Runs the full search loop for one seed and writes the log, the
/// checkpoint, and the best-model summary under `config.output_dir`.
pub fn run_search(config: &RunConfig) -> Result<RunSummary, RunError> {
    std::fs::create_dir_all(&config.output_dir)?;
    let log_path = config.output_dir.join(LOG_FILE);
    let mut log = LogWriter::create(&log_path)?;
    log.append(&RunRecord::Header {
        version: LOG_VERSION,
        started_unix_s: SystemTime::now()
            .duration_since(SystemTime::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0),
        config: Box::new(config.clone()),
    })?;

    let evaluator = build_evaluator(config)?;
    let encoder = ImrEncoder::new(derive_seed(config.seed, &["imr"]));
    let env = Environment::new(evaluator.as_ref(), &encoder, config.input_shape());
    let mut agent = DdpgAgent::new(DdpgConfig {
        seed: derive_seed(config.seed, &["agent"]),
        ..config.controller
    });
    let mut buffer = ReplayBuffer::new(config.controller.buffer_capacity);
    let mut update_rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, &["updates"]));
    let start = Instant::now();

    let mut best: Vec<BestModel> = Vec::new();
    let mut episodes_run = 0usize;
    let mut exploration_returns = Vec::new();
    let mut exploitation_returns = Vec::new();

    for episode in 0..config.episodes {
        if let Some(limit) = config.wallclock_budget_s {
            if start.elapsed().as_secs_f64() >= limit {
                break;
            }
        }
        let exploring = episode < config.exploration_episodes;
        let phase = if exploring { Phase::Exploration } else { Phase::Exploitation };
        let sigma = if exploring {
            config.noise_sigma * config.noise_decay.powi(episode as i32)
        } else {
            0.0
        };

        // rollout phase: actor parameters are frozen while workers read them
        let outputs: Vec<RolloutOutput> = std::thread::scope(|scope| {
            let agent_ref = &agent;
            let env_ref = &env;
            let handles: Vec<_> = (0..config.models_per_episode)
                .map(|r| {
                    let seed = derive_seed(
                        config.seed,
                        &["episode", &episode.to_string(), "rollout", &r.to_string()],
                    );
                    scope.spawn(move || {
                        run_rollout(env_ref, agent_ref, episode, r, phase, sigma, seed, start)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("rollout thread")).collect()
        });

        let mut episode_returns = Vec::with_capacity(outputs.len());
        let mut best_accuracy: f64 = 0.0;
        for out in outputs {
            for record in &out.records {
                log.append(record)?;
                if let RunRecord::Model { accuracy, layers, param_count, t_s, arch_json, arch_digest, .. } = record {
                    if !best.iter().any(|b| &b.digest == arch_digest) {
                        best.push(BestModel {
                            digest: arch_digest.clone(),
                            accuracy: *accuracy,
                            layers: *layers,
                            param_count: *param_count,
                            t_s: *t_s,
                            arch_json: arch_json.clone(),
                        });
                    }
                }
            }
            episode_returns.push(out.episode_return);
            best_accuracy = best_accuracy.max(out.final_accuracy);
            if exploring {
                for t in out.transitions {
                    buffer.push(t);
                }
            }
        }
        let mean_return =
            episode_returns.iter().sum::<f64>() / episode_returns.len().max(1) as f64;
        if exploring {
            exploration_returns.push(mean_return);
        } else {
            exploitation_returns.push(mean_return);
        }
        log.append(&RunRecord::Episode {
            episode,
            phase,
            sigma,
            mean_return,
            best_accuracy,
            t_s: start.elapsed().as_secs_f64(),
        })?;

        // update phase: exclusive parameter mutation behind the barrier
        let ready = buffer.len() >= config.update_start.max(config.controller.batch_size);
        if ready {
            for round in 0..config.opt_rounds_per_episode {
                let stats = agent.update(&buffer, &mut update_rng)?;
                log.append(&RunRecord::Update {
                    episode,
                    round,
                    critic_loss: stats.critic_loss,
                    actor_loss: stats.actor_loss,
                    t_s: start.elapsed().as_secs_f64(),
                })?;
            }
        }
        episodes_run += 1;
    }

    let checkpoint_path = config.output_dir.join(CHECKPOINT_FILE);
    agent
        .checkpoint()
        .save(&checkpoint_path)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))?;

    best.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.t_s.total_cmp(&b.t_s)));
    best.truncate(10);
    std::fs::write(
        config.output_dir.join(BEST_MODELS_FILE),
        serde_json::to_string_pretty(&best)?,
    )?;

    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok(RunSummary {
        episodes_run,
        log_path,
        checkpoint_path,
        best_models: best,
        exploration_mean_return: mean(&exploration_returns),
        exploitation_mean_return: mean(&exploitation_returns),
        evaluations: evaluator.evaluations(),
        buffer_appended: buffer.total_appended(),
        wallclock_s: start.elapsed().as_secs_f64(),
    })
}

/// Mean returns of episodes driven by uniform-random actions, measured
/// with the same environment construction as the search itself.
pub fn random_policy_returns(config: &RunConfig, episodes: usize) -> Result<Vec<f64>, RunError> {
    use rand::Rng;
    let evaluator = build_evaluator(&RunConfig { cache: false, ..config.clone() })?;
    let encoder = ImrEncoder::new(derive_seed(config.seed, &["imr"]));
    let env = Environment::new(evaluator.as_ref(), &encoder, config.input_shape());
    let mut returns = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
            config.seed,
            &["random-policy", &i.to_string()],
        ));
        let mut state: EnvState = env.reset();
        let mut total = 0.0;
        loop {
            let action = ActionVector::new([rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
            let out = env.step(&state, &action).map_err(|e| match e {
                crate::env::EnvError::Eval(inner) => RunError::Eval(inner),
                other => RunError::Env(other.to_string()),
            })?;
            total += out.reward;
            state = out.state;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}
