//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers. Run with `cargo test --test acceptance`
//! (add `-- --nocapture` to see the lines).

mod support;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use std::path::Path;
use std::sync::Arc;

use trlhpo::agent::{DdpgAgent, DdpgConfig};
use trlhpo::env::{check_stop, Environment, ImrEncoder, StopReason, CHANCE_ACCURACY};
use trlhpo::eval::{
    generate_fixture, surrogate_known_optimum, Dataset, Evaluate, RealEvaluator,
    SurrogateEvaluator, TrainBudget,
};
use trlhpo::run::{
    random_policy_returns, read_log, report_attention_diff, report_layer_affinity, run_search,
    EvalMode, RunConfig, RunRecord,
};
use trlhpo::space::{
    decode_action, propagate_shape, ActionVector, Activation, ArchSpec, FeatureShape, LayerSpec,
};

use support::{checked_primitives, gradcheck_net, random_state, NetKind};

const FD_EPS: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-7;

/// Criterion 1: analytic gradients match central finite differences for
/// every primitive and for full actor/critic passes.
#[test]
fn criterion_1_gradient_fidelity() {
    let start = Instant::now();
    let mut total_cases = 0usize;

    for prim in checked_primitives() {
        for case in 0..100 {
            let seed = 1000 + case;
            assert!(
                (prim.check)(seed, FD_EPS, RTOL, ATOL),
                "primitive {} failed gradient check on case {case}",
                prim.name
            );
        }
        total_cases += 100;
    }

    for kind in [NetKind::Actor, NetKind::Critic] {
        for case in 0..100 {
            let seed = 5000 + case;
            assert!(
                gradcheck_net(kind, seed, FD_EPS, RTOL, ATOL),
                "{kind:?} forward failed gradient check on case {case}"
            );
        }
        total_cases += 100;
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "criterion 1 took {elapsed:?}");
    println!(
        "ACCEPT 1 gradient-fidelity: PASS ({total_cases} cases, rtol {RTOL}, {elapsed:?})"
    );
}

/// Criterion 2: actor/critic ranges, attention row normalization, and
/// causal prefix determinism over 50 random states.
#[test]
fn criterion_2_transformer_invariants() {
    let start = Instant::now();
    let agent = DdpgAgent::new(DdpgConfig { seed: 11, ..DdpgConfig::default() });
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    for case in 0..50 {
        let state = random_state(&mut rng);
        let (action, attn) = agent.actor_forward(&state);
        assert!(
            action.components().iter().all(|v| (0.0..=1.0).contains(v)),
            "actor output out of range on case {case}"
        );
        for h in 0..attn.heads {
            for q in 0..attn.seq {
                let sum: f64 = attn.row(h, q).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9, "attention row sum {sum}");
            }
        }
        let q = agent.critic_forward(&state, &action);
        assert!((-1.0..=1.0).contains(&q), "critic value {q} out of range");

        // causal prefix determinism: scribbling on slots beyond the
        // filled prefix cannot change the action
        let mut scribbled = state.clone();
        let k = scribbled.layer_count;
        {
            let slots = scribbled.slots_mut();
            for row in (k + 1)..trlhpo::space::MAX_LAYERS {
                for j in 0..trlhpo::env::IMR_DIM {
                    slots[row * trlhpo::env::IMR_DIM + j] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let (action2, _) = agent.actor_forward(&scribbled);
        assert_eq!(
            action.components(),
            action2.components(),
            "future slots leaked into the action on case {case}"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "criterion 2 took {elapsed:?}");
    println!("ACCEPT 2 transformer-invariants: PASS (50 states, {elapsed:?})");
}

/// Criterion 3: decoded layers always land in the grid; shape propagation
/// matches window enumeration; the grid mapping is surjective.
#[test]
fn criterion_3_search_space_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(3);

    // 10,000 random actions against random shapes
    for _ in 0..10_000 {
        let shape = random_feature_shape(&mut rng);
        let a = ActionVector::new([rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
        let layer = decode_action(&a, &shape);
        assert!(layer.in_grid(), "decoded {layer:?} outside the grid for {shape:?}");
        if shape.is_flat() {
            assert!(matches!(layer, LayerSpec::FCL { .. }));
        }
    }

    // 1,000 random (shape, layer) pairs against the sliding-window oracle
    let mut checked = 0;
    while checked < 1000 {
        let shape = random_grid_shape(&mut rng);
        let a = ActionVector::new([rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
        let layer = decode_action(&a, &shape);
        let got = propagate_shape(&shape, &layer).expect("legalized layer propagates");
        assert_eq!(got, window_oracle(&shape, &layer), "mismatch for {layer:?} on {shape:?}");
        checked += 1;
    }

    // surjectivity: every grid value is reachable from some action
    surjectivity_exhaustive();

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "criterion 3 took {elapsed:?}");
    println!("ACCEPT 3 search-space-oracles: PASS (10000 decodes, 1000 shape pairs, {elapsed:?})");
}

/// Criterion 4: rewards telescope to final accuracy minus chance, and the
/// stopping rules fire exactly as specified.
#[test]
fn criterion_4_reward_telescoping_and_stops() {
    let start = Instant::now();
    let sur = SurrogateEvaluator::new(4);
    let enc = ImrEncoder::new(4);
    let env = Environment::new(&sur, &enc, (1, 28, 28));
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    for episode in 0..100 {
        let mut state = env.reset();
        let mut total = 0.0;
        loop {
            let a = ActionVector::new([rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
            let out = env.step(&state, &a).expect("surrogate step");
            total += out.reward;
            state = out.state;
            if out.done {
                break;
            }
        }
        let expect = state.last_accuracy - CHANCE_ACCURACY;
        assert!(
            (total - expect).abs() < 1e-12,
            "episode {episode}: rewards sum {total} vs accuracy delta {expect}"
        );
    }

    // constructed stopping edge cases
    assert_eq!(check_stop(6, 0.05, 0.95), Some(StopReason::MaxLayers));
    assert_eq!(check_stop(6, -1.0, 0.1), Some(StopReason::MaxLayers));
    assert_eq!(check_stop(3, 0.0005, 0.95), Some(StopReason::MinImprovement));
    assert_eq!(check_stop(2, 0.000999, 0.95), Some(StopReason::MinImprovement));
    assert_eq!(check_stop(2, 0.001, 0.95), None);
    assert_eq!(check_stop(2, 0.05, 0.599), Some(StopReason::LowAccuracy));
    assert_eq!(check_stop(2, 0.05, 0.60), None);
    assert_eq!(check_stop(1, 0.0005, 0.95), None);
    assert_eq!(check_stop(1, 0.0005, 0.59), Some(StopReason::LowAccuracy));

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "criterion 4 took {elapsed:?}");
    println!("ACCEPT 4 reward-telescoping: PASS (100 episodes, {elapsed:?})");
}

// ── helpers ───────────────────────────────────────────────────────────

fn random_feature_shape(rng: &mut ChaCha12Rng) -> FeatureShape {
    if rng.gen_bool(0.25) {
        FeatureShape::Flat { len: rng.gen_range(1..2048) }
    } else {
        random_grid_shape(rng)
    }
}

fn random_grid_shape(rng: &mut ChaCha12Rng) -> FeatureShape {
    FeatureShape::Grid {
        channels: rng.gen_range(1..64),
        height: rng.gen_range(1..40),
        width: rng.gen_range(1..40),
    }
}

/// Independent shape oracle: literally count the window positions.
fn window_oracle(shape: &FeatureShape, layer: &LayerSpec) -> FeatureShape {
    let count = |size: usize, kernel: usize, stride: usize, padding: usize| {
        let mut n = 0usize;
        let mut start = -(padding as i64);
        loop {
            if start + kernel as i64 > (size + padding) as i64 {
                break;
            }
            n += 1;
            start += stride as i64;
        }
        n
    };
    match (*shape, *layer) {
        (_, LayerSpec::FCL { neurons, .. }) => FeatureShape::Flat { len: neurons },
        (FeatureShape::Grid { height, width, .. }, LayerSpec::Conv2D { filters, kernel, stride }) => {
            FeatureShape::Grid {
                channels: filters,
                height: count(height, kernel, stride, 0),
                width: count(width, kernel, stride, 0),
            }
        }
        (
            FeatureShape::Grid { channels, height, width },
            LayerSpec::MaxPool { kernel, stride, padding },
        ) => FeatureShape::Grid {
            channels,
            height: count(height, kernel, stride, padding),
            width: count(width, kernel, stride, padding),
        },
        (FeatureShape::Flat { .. }, _) => unreachable!("legalize forbids grid ops on flat input"),
    }
}

fn surjectivity_exhaustive() {
    use trlhpo::space::{
        fcl_neurons, grid_index, ACTIVATIONS, CONV_FILTERS, CONV_KERNELS, CONV_STRIDES,
        POOL_KERNELS, POOL_PADDINGS, POOL_STRIDES,
    };
    let shape = FeatureShape::Grid { channels: 1, height: 28, width: 28 };
    // every conv hyper-parameter combination is reachable
    for (fi, &filters) in CONV_FILTERS.iter().enumerate() {
        for (ki, &kernel) in CONV_KERNELS.iter().enumerate() {
            for (si, &stride) in CONV_STRIDES.iter().enumerate() {
                let a = ActionVector::new([
                    0.1,
                    (fi as f64 + 0.5) / CONV_FILTERS.len() as f64,
                    (ki as f64 + 0.5) / CONV_KERNELS.len() as f64,
                    (si as f64 + 0.5) / CONV_STRIDES.len() as f64,
                ]);
                assert_eq!(
                    decode_action(&a, &shape),
                    LayerSpec::Conv2D { filters, kernel, stride }
                );
            }
        }
    }
    for (ki, &kernel) in POOL_KERNELS.iter().enumerate() {
        for (si, &stride) in POOL_STRIDES.iter().enumerate() {
            for (pi, &padding) in POOL_PADDINGS.iter().enumerate() {
                let a = ActionVector::new([
                    0.9,
                    (ki as f64 + 0.5) / POOL_KERNELS.len() as f64,
                    (si as f64 + 0.5) / POOL_STRIDES.len() as f64,
                    (pi as f64 + 0.5) / POOL_PADDINGS.len() as f64,
                ]);
                assert_eq!(
                    decode_action(&a, &shape),
                    LayerSpec::MaxPool { kernel, stride, padding }
                );
            }
        }
    }
    let neurons = fcl_neurons();
    for (ni, &n) in neurons.iter().enumerate() {
        for (ai, &activation) in ACTIVATIONS.iter().enumerate() {
            for (bias, a2) in [(true, 0.75), (false, 0.25)] {
                let a = ActionVector::new([
                    0.5,
                    (ni as f64 + 0.5) / neurons.len() as f64,
                    a2,
                    (ai as f64 + 0.5) / ACTIVATIONS.len() as f64,
                ]);
                assert_eq!(
                    decode_action(&a, &shape),
                    LayerSpec::FCL { neurons: n, bias, activation }
                );
            }
        }
    }
    // index mapping is monotone in the action component
    for n in [3usize, 7, 16, 63] {
        let mut prev = 0;
        for s in 0..=10_000 {
            let idx = grid_index(s as f64 / 10_000.0, n);
            assert!(idx >= prev);
            prev = idx;
        }
    }
}
