//! Deterministic policy-gradient agent: online/target actor and critic
//! pairs, Adam with separate learning rates, Gaussian exploration noise,
//! and soft target tracking.

use rand::Rng;
use thiserror::Error;

use super::replay::ReplayBuffer;
use super::transformer::{Attention, BoundNet, OutputSquash, TransformerConfig, TransformerNet};
use crate::env::{EnvState, IMR_DIM};
use crate::space::{ActionVector, MAX_LAYERS};
use crate::tensor::{Adam, Checkpoint, Gradients, Tape, Tensor, TensorError};
use crate::util::{derive_seed, gaussian};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("non-finite gradient while updating the {net}")]
    NonFiniteGradient { net: &'static str },
    #[error("soft update: parameter {name} has shape {target:?}, online is {online:?}")]
    SoftUpdateMismatch {
        name: String,
        online: Vec<usize>,
        target: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint missing parameter {0}")]
    MissingParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DdpgConfig {
    pub net: TransformerConfig,
    /// Discount on future layer rewards.
    pub gamma: f64,
    /// Soft-update coefficient for both target nets.
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub seed: u64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            net: TransformerConfig::base(),
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-5,
            critic_lr: 1e-4,
            batch_size: 64,
            buffer_capacity: 2000,
            seed: 0,
        }
    }
}

/// Bootstrapped critic targets are clamped to this magnitude, just
/// inside the tanh output range.
pub const TARGET_LIMIT: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
}

pub struct DdpgAgent {
    pub cfg: DdpgConfig,
    actor: TransformerNet,
    critic: TransformerNet,
    target_actor: TransformerNet,
    target_critic: TransformerNet,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl DdpgAgent {
    pub fn new(cfg: DdpgConfig) -> Self {
        assert_eq!(cfg.net.input_dim, IMR_DIM, "state tokens are IMR rows");
        assert_eq!(cfg.net.seq_len, MAX_LAYERS, "one slot per layer");
        let actor = TransformerNet::actor(cfg.net, derive_seed(cfg.seed, &["actor-init"]));
        let critic = TransformerNet::critic(cfg.net, derive_seed(cfg.seed, &["critic-init"]));
        // targets start as exact copies of the online nets
        let target_actor = actor.clone();
        let target_critic = critic.clone();
        let actor_opt = Adam::new(cfg.actor_lr);
        let critic_opt = Adam::new(cfg.critic_lr);
        DdpgAgent { cfg, actor, critic, target_actor, target_critic, actor_opt, critic_opt }
    }

    pub fn actor_net(&self) -> &TransformerNet {
        &self.actor
    }

    pub fn target_actor_net(&self) -> &TransformerNet {
        &self.target_actor
    }

    pub fn critic_net(&self) -> &TransformerNet {
        &self.critic
    }

    pub fn target_critic_net(&self) -> &TransformerNet {
        &self.target_critic
    }

    /// Deterministic policy output with the attention that produced it.
    pub fn actor_forward(&self, state: &EnvState) -> (ActionVector, Attention) {
        actor_eval(&self.actor, state)
    }

    /// Q-value of a state-action pair under the online critic.
    pub fn critic_forward(&self, state: &EnvState, action: &ActionVector) -> f64 {
        critic_eval(&self.critic, state, action)
    }

    /// Policy output plus clipped Gaussian exploration noise.
    pub fn select_action(
        &self,
        state: &EnvState,
        noise_sigma: f64,
        rng: &mut impl Rng,
    ) -> (ActionVector, Attention) {
        let (clean, attn) = self.actor_forward(state);
        (apply_noise(&clean, noise_sigma, rng), attn)
    }

    /// One optimization round: a critic step toward the bootstrapped
    /// targets, an actor step up the critic's value, then soft target
    /// updates.
    pub fn update(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut impl Rng,
    ) -> Result<UpdateStats, ControllerError> {
        let batch = buffer.sample_indices(rng, self.cfg.batch_size);

        // y = r + gamma * (1 - done) * Q_target(s', actor_target(s')),
        // clamped into the tanh head's representable range. True returns
        // are accuracy deltas summing to less than 1, so the clamp only
        // trims transient bootstrap overestimates that would otherwise
        // saturate the critic.
        let targets: Vec<f64> = batch
            .iter()
            .map(|&i| {
                let t = buffer.get(i);
                let y = if t.done {
                    t.reward
                } else {
                    let (a2, _) = actor_eval(&self.target_actor, &t.next_state);
                    t.reward + self.cfg.gamma * critic_eval(&self.target_critic, &t.next_state, &a2)
                };
                y.clamp(-TARGET_LIMIT, TARGET_LIMIT)
            })
            .collect();

        // critic: mean squared TD error
        let mut tape = Tape::new();
        let bound_c = self.critic.bind(&mut tape, true);
        let mut acc = None;
        for (&i, &y) in batch.iter().zip(&targets) {
            let t = buffer.get(i);
            let tokens = tape.constant(&state_tokens(&t.state));
            let action = tape.constant(&action_tensor(&t.action));
            let (q, _) = self.critic.critic_forward_t(&mut tape, &bound_c, tokens, action)?;
            let yv = tape.constant(&Tensor::new(vec![1, 1], vec![y]).expect("target"));
            let d = tape.sub(q, yv)?;
            let sq = tape.mul(d, d)?;
            acc = Some(match acc {
                None => sq,
                Some(prev) => tape.add(prev, sq)?,
            });
        }
        let loss = tape.scale(acc.expect("non-empty batch"), 1.0 / self.cfg.batch_size as f64);
        let critic_loss = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        if !grads.is_finite() {
            return Err(ControllerError::NonFiniteGradient { net: "critic" });
        }
        apply_updates(&mut self.critic, &mut self.critic_opt, &bound_c, &grads);

        // actor: ascend Q(s, actor(s)) by descending its negation
        let mut tape = Tape::new();
        let bound_a = self.actor.bind(&mut tape, true);
        let bound_c = self.critic.bind(&mut tape, false);
        let mut acc = None;
        for &i in &batch {
            let t = buffer.get(i);
            let tokens = tape.constant(&state_tokens(&t.state));
            let (a, _) =
                self.actor
                    .actor_forward_t(&mut tape, &bound_a, tokens, t.state.active_slot())?;
            let (q, _) = self.critic.critic_forward_t(&mut tape, &bound_c, tokens, a)?;
            acc = Some(match acc {
                None => q,
                Some(prev) => tape.add(prev, q)?,
            });
        }
        let loss = tape.scale(acc.expect("non-empty batch"), -1.0 / self.cfg.batch_size as f64);
        let actor_loss = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        if !grads.is_finite() {
            return Err(ControllerError::NonFiniteGradient { net: "actor" });
        }
        apply_updates(&mut self.actor, &mut self.actor_opt, &bound_a, &grads);

        soft_update(&self.actor, &mut self.target_actor, self.cfg.tau)?;
        soft_update(&self.critic, &mut self.target_critic, self.cfg.tau)?;
        Ok(UpdateStats { critic_loss, actor_loss })
    }

    /// All four nets plus optimizer state, as one manifest.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        let nets: [(&str, &TransformerNet); 4] = [
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("target_actor", &self.target_actor),
            ("target_critic", &self.target_critic),
        ];
        for (prefix, net) in nets {
            net.for_each_param(&mut |name, t| ckpt.push(format!("{prefix}.{name}"), t));
        }
        for (prefix, opt) in [("actor_opt", &self.actor_opt), ("critic_opt", &self.critic_opt)] {
            let (t, state) = opt.export_state();
            ckpt.scalars.insert(format!("{prefix}.t"), t as f64);
            for (name, st) in state {
                ckpt.push(
                    format!("{prefix}.m.{name}"),
                    &Tensor::from_vec(st.m.clone()),
                );
                ckpt.push(
                    format!("{prefix}.v.{name}"),
                    &Tensor::from_vec(st.v.clone()),
                );
            }
        }
        ckpt
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), ControllerError> {
        let nets: [(&str, &mut TransformerNet); 4] = [
            ("actor", &mut self.actor),
            ("critic", &mut self.critic),
            ("target_actor", &mut self.target_actor),
            ("target_critic", &mut self.target_critic),
        ];
        for (prefix, net) in nets {
            let mut missing = None;
            net.for_each_param_mut(&mut |name, t| {
                let full = format!("{prefix}.{name}");
                match ckpt.get(&full) {
                    Some(loaded) if loaded.shape() == t.shape() => {
                        *t = loaded.with_grad();
                    }
                    _ => missing = Some(full),
                }
            });
            if let Some(name) = missing {
                return Err(ControllerError::MissingParam(name));
            }
        }
        for (prefix, opt, net) in [
            ("actor_opt", &mut self.actor_opt, &self.actor),
            ("critic_opt", &mut self.critic_opt, &self.critic),
        ] {
            let t = ckpt.scalars.get(&format!("{prefix}.t")).copied().unwrap_or(0.0) as u64;
            let mut state = std::collections::BTreeMap::new();
            for name in net.param_names() {
                let m = ckpt.get(&format!("{prefix}.m.{name}"));
                let v = ckpt.get(&format!("{prefix}.v.{name}"));
                if let (Some(m), Some(v)) = (m, v) {
                    state.insert(
                        name,
                        crate::tensor::AdamState { m: m.data().to_vec(), v: v.data().to_vec() },
                    );
                }
            }
            opt.import_state(t, state);
        }
        Ok(())
    }
}

/// Componentwise Gaussian noise, clipped back into the unit box.
pub fn apply_noise(action: &ActionVector, sigma: f64, rng: &mut impl Rng) -> ActionVector {
    ActionVector::new(action.components().map(|a| a + sigma * gaussian(rng)))
}

/// `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn soft_update(
    online: &TransformerNet,
    target: &mut TransformerNet,
    tau: f64,
) -> Result<(), ControllerError> {
    let mut online_params: Vec<(String, Tensor)> = Vec::new();
    online.for_each_param(&mut |name, t| online_params.push((name.to_string(), t.clone())));
    let mut k = 0;
    let mut err = None;
    target.for_each_param_mut(&mut |name, t| {
        let (online_name, online_t) = &online_params[k];
        k += 1;
        if err.is_some() {
            return;
        }
        if online_name != name || online_t.shape() != t.shape() {
            err = Some(ControllerError::SoftUpdateMismatch {
                name: name.to_string(),
                online: online_t.shape().to_vec(),
                target: t.shape().to_vec(),
            });
            return;
        }
        for (tv, ov) in t.data_mut().iter_mut().zip(online_t.data()) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Mean squared parameter distance between two nets.
pub fn param_distance(a: &TransformerNet, b: &TransformerNet) -> f64 {
    let mut a_params = Vec::new();
    a.for_each_param(&mut |_, t| a_params.push(t.clone()));
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut k = 0;
    b.for_each_param(&mut |_, t| {
        for (x, y) in t.data().iter().zip(a_params[k].data()) {
            sum += (x - y) * (x - y);
        }
        n += t.numel();
        k += 1;
    });
    (sum / n as f64).sqrt()
}

fn state_tokens(state: &EnvState) -> Tensor {
    Tensor::new(vec![MAX_LAYERS, IMR_DIM], state.slots().to_vec()).expect("slot matrix")
}

fn action_tensor(a: &ActionVector) -> Tensor {
    Tensor::new(vec![1, 4], a.components().to_vec()).expect("action row")
}

fn actor_eval(net: &TransformerNet, state: &EnvState) -> (ActionVector, Attention) {
    debug_assert_eq!(net.squash, OutputSquash::Sigmoid);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let tokens = tape.constant(&state_tokens(state));
    let (out, attn) = net
        .actor_forward_t(&mut tape, &bound, tokens, state.active_slot())
        .expect("actor forward on fixed shapes");
    let v = tape.value(out);
    (ActionVector::new([v[0], v[1], v[2], v[3]]), attn)
}

fn critic_eval(net: &TransformerNet, state: &EnvState, action: &ActionVector) -> f64 {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let tokens = tape.constant(&state_tokens(state));
    let act = tape.constant(&action_tensor(action));
    let (q, _) = net
        .critic_forward_t(&mut tape, &bound, tokens, act)
        .expect("critic forward on fixed shapes");
    tape.value(q)[0]
}

fn apply_updates(net: &mut TransformerNet, opt: &mut Adam, bound: &BoundNet, grads: &Gradients) {
    opt.begin_step();
    let ids = bound.ids();
    let mut k = 0;
    net.for_each_param_mut(&mut |name, param| {
        opt.update(name, param, &grads.get(ids[k]));
        k += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn test_agent(seed: u64) -> DdpgAgent {
        DdpgAgent::new(DdpgConfig { seed, ..DdpgConfig::default() })
    }

    #[test]
    fn actor_outputs_unit_box_and_is_deterministic() {
        let agent = test_agent(1);
        let state = EnvState::initial((1, 28, 28));
        let (a, _) = agent.actor_forward(&state);
        let (b, _) = agent.actor_forward(&state);
        assert_eq!(a, b);
        assert!(a.components().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sigma_zero_is_the_clean_action() {
        let agent = test_agent(2);
        let state = EnvState::initial((1, 28, 28));
        let (clean, _) = agent.actor_forward(&state);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (noisy, _) = agent.select_action(&state, 0.0, &mut rng);
        assert_eq!(clean, noisy);
    }

    #[test]
    fn noise_is_clipped_and_has_the_right_scale() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let clean = ActionVector::new([0.5; 4]);
        // huge sigma stays in the box
        for _ in 0..100 {
            let noisy = apply_noise(&clean, 5.0, &mut rng);
            assert!(noisy.components().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // sigma 0.1 on an interior action: empirical std over 1e4 draws
        let mut deltas = Vec::new();
        for _ in 0..10_000 {
            let noisy = apply_noise(&clean, 0.1, &mut rng);
            for (n, c) in noisy.components().iter().zip(clean.components()) {
                deltas.push(n - c);
            }
        }
        let mean: f64 = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let var: f64 =
            deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / deltas.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.1).abs() < 0.005, "empirical std {std}");
    }

    #[test]
    fn soft_update_endpoints() {
        let agent_a = test_agent(4);
        let agent_b = test_agent(5);
        // tau = 1: target becomes online
        let mut target = agent_b.actor.clone();
        soft_update(&agent_a.actor, &mut target, 1.0).unwrap();
        assert!(param_distance(&agent_a.actor, &target) < 1e-15);
        // tau = 0: target unchanged
        let mut target = agent_b.actor.clone();
        soft_update(&agent_a.actor, &mut target, 0.0).unwrap();
        assert!(param_distance(&agent_b.actor, &target) < 1e-15);
    }

    #[test]
    fn soft_update_arithmetic() {
        // single-parameter arithmetic: 0 + tau * (1 - 0) = tau
        let mut online = test_agent(6).actor;
        let mut target = online.clone();
        online.for_each_param_mut(&mut |_, t| t.data_mut().fill(1.0));
        target.for_each_param_mut(&mut |_, t| t.data_mut().fill(0.0));
        soft_update(&online, &mut target, 0.005).unwrap();
        target.for_each_param(&mut |_, t| {
            for v in t.data() {
                assert!((v - 0.005).abs() < 1e-15);
            }
        });
    }

    #[test]
    fn repeated_soft_updates_converge_monotonically() {
        let agent = test_agent(7);
        let mut target = test_agent(8).actor;
        let mut prev = param_distance(&agent.actor, &target);
        for _ in 0..20 {
            soft_update(&agent.actor, &mut target, 0.1).unwrap();
            let d = param_distance(&agent.actor, &target);
            assert!(d < prev, "distance rose: {d} >= {prev}");
            prev = d;
        }
    }

    #[test]
    fn targets_start_equal_to_online() {
        let agent = test_agent(9);
        assert_eq!(param_distance(&agent.actor, &agent.target_actor), 0.0);
        assert_eq!(param_distance(&agent.critic, &agent.target_critic), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs() {
        let agent = test_agent(10);
        let ckpt = agent.checkpoint();
        let mut other = test_agent(11);
        let state = EnvState::initial((1, 28, 28));
        let (before, _) = other.actor_forward(&state);
        other.restore(&ckpt).unwrap();
        let (after, _) = other.actor_forward(&state);
        let (original, _) = agent.actor_forward(&state);
        assert_ne!(before, after);
        assert_eq!(after, original);
    }
}
