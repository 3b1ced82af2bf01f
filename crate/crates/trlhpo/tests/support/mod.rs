//! Shared helpers for the integration suites: finite-difference checks
//! for every tape primitive and for whole actor/critic passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use trlhpo::agent::{TransformerConfig, TransformerNet};
use trlhpo::env::EnvState;
use trlhpo::space::MAX_LAYERS;
use trlhpo::tensor::{finite_diff_grad, grads_close, Tape, Tensor, ValueId};

type BuildFn = dyn Fn(&mut Tape, &[ValueId]) -> ValueId;

/// Compares analytic gradients of `sum(build(inputs) * w)` against
/// central finite differences, for every input.
fn check_against_fd(
    inputs: &[Tensor],
    build: &BuildFn,
    weight_seed: u64,
    eps: f64,
    rtol: f64,
    atol: f64,
) -> bool {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
    let out = build(&mut tape, &ids);
    let w = random_weights(tape.shape(out).to_vec(), weight_seed);
    let loss = scalarize(&mut tape, out, &w);
    let grads = tape.backward(loss).expect("scalar loss");

    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[i]);
        let f = |probe: &Tensor| {
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| tape.constant(if j == i { probe } else { t }))
                .collect();
            let out = build(&mut tape, &ids);
            let loss = scalarize(&mut tape, out, &w);
            tape.value(loss)[0]
        };
        let numeric = finite_diff_grad(f, x, eps);
        if !grads_close(&analytic, &numeric, rtol, atol) {
            return false;
        }
    }
    true
}

fn scalarize(tape: &mut Tape, out: ValueId, w: &Tensor) -> ValueId {
    let wid = tape.constant(w);
    let prod = tape.mul(out, wid).expect("weights match output shape");
    tape.sum(prod)
}

fn random_weights(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("weights")
}

fn uniform(rng: &mut ChaCha12Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("tensor")
}

/// Values bounded away from zero, for kinked activations.
fn away_from_zero(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("tensor")
}

/// Distinct well-separated values, for max-based ops.
fn distinct_values(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.0137 - n as f64 * 0.006).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, vals).expect("tensor")
}

fn dims(rng: &mut ChaCha12Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=8)).collect()
}

pub struct PrimitiveCheck {
    pub name: &'static str,
    pub check: fn(u64, f64, f64, f64) -> bool,
}

macro_rules! prim {
    ($name:literal, $f:expr) => {
        PrimitiveCheck { name: $name, check: $f }
    };
}

/// One finite-difference check per tape primitive.
pub fn checked_primitives() -> Vec<PrimitiveCheck> {
    vec![
        prim!("matmul", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let (m, k, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
            let a = uniform(&mut rng, vec![m, k], -2.0, 2.0);
            let b = uniform(&mut rng, vec![k, n], -2.0, 2.0);
            check_against_fd(&[a, b], &|t, ids| t.matmul(ids[0], ids[1]).unwrap(), seed, eps, rtol, atol)
        }),
        prim!("transpose", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a], &|t, ids| t.transpose(ids[0]).unwrap(), seed, eps, rtol, atol)
        }),
        prim!("add", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d.clone(), -2.0, 2.0);
            let b = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a, b], &|t, ids| t.add(ids[0], ids[1]).unwrap(), seed, eps, rtol, atol)
        }),
        prim!("add_row_broadcast", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d.clone(), -2.0, 2.0);
            let b = uniform(&mut rng, vec![d[1]], -2.0, 2.0);
            check_against_fd(&[a, b], &|t, ids| t.add(ids[0], ids[1]).unwrap(), seed, eps, rtol, atol)
        }),
        prim!("add_scalar_broadcast", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d, -2.0, 2.0);
            let b = uniform(&mut rng, vec![1], -2.0, 2.0);
            check_against_fd(&[a, b], &|t, ids| t.add(ids[0], ids[1]).unwrap(), seed, eps, rtol, atol)
        }),
        prim!("sub", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d.clone(), -2.0, 2.0);
            let b = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a, b], &|t, ids| t.sub(ids[0], ids[1]).unwrap(), seed, eps, rtol, atol)
        }),
        prim!("mul", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d.clone(), -2.0, 2.0);
            let b = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a, b], &|t, ids| t.mul(ids[0], ids[1]).unwrap(), seed, eps, rtol, atol)
        }),
        prim!("scale", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d, -2.0, 2.0);
            let c = rng.gen_range(-3.0..3.0);
            check_against_fd(&[a], &move |t, ids| t.scale(ids[0], c), seed, eps, rtol, atol)
        }),
        prim!("relu", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = away_from_zero(&mut rng, d);
            check_against_fd(&[a], &|t, ids| t.relu(ids[0]), seed, eps, rtol, atol)
        }),
        prim!("leaky_relu", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = away_from_zero(&mut rng, d);
            check_against_fd(&[a], &|t, ids| t.leaky_relu(ids[0], 0.01), seed, eps, rtol, atol)
        }),
        prim!("tanh", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a], &|t, ids| t.tanh(ids[0]), seed, eps, rtol, atol)
        }),
        prim!("sigmoid", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a], &|t, ids| t.sigmoid(ids[0]), seed, eps, rtol, atol)
        }),
        prim!("elu", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a], &|t, ids| t.elu(ids[0]), seed, eps, rtol, atol)
        }),
        prim!("gelu", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a], &|t, ids| t.gelu(ids[0]), seed, eps, rtol, atol)
        }),
        prim!("softmax", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a], &|t, ids| t.softmax(ids[0]), seed, eps, rtol, atol)
        }),
        prim!("masked_fill_softmax", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..=8);
            let a = uniform(&mut rng, vec![n, n], -2.0, 2.0);
            let mask = trlhpo::agent::causal_mask(n);
            check_against_fd(
                &[a],
                &move |t, ids| {
                    let m = t.masked_fill(ids[0], &mask).unwrap();
                    t.softmax(m)
                },
                seed,
                eps,
                rtol,
                atol,
            )
        }),
        prim!("layer_norm", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let x = uniform(&mut rng, d.clone(), -2.0, 2.0);
            let gamma = uniform(&mut rng, vec![d[1]], 0.5, 1.5);
            let beta = uniform(&mut rng, vec![d[1]], -1.0, 1.0);
            check_against_fd(
                &[x, gamma, beta],
                &|t, ids| t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap(),
                seed,
                eps,
                rtol,
                atol,
            )
        }),
        prim!("reshape", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d.clone(), -2.0, 2.0);
            let flat = d[0] * d[1];
            check_against_fd(
                &[a],
                &move |t, ids| t.reshape(ids[0], vec![flat]).unwrap(),
                seed,
                eps,
                rtol,
                atol,
            )
        }),
        prim!("mean", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a], &|t, ids| t.mean(ids[0]), seed, eps, rtol, atol)
        }),
        prim!("sum", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d, -2.0, 2.0);
            check_against_fd(&[a], &|t, ids| t.sum(ids[0]), seed, eps, rtol, atol)
        }),
        prim!("select_row", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d.clone(), -2.0, 2.0);
            let row = rng.gen_range(0..d[0]);
            check_against_fd(
                &[a],
                &move |t, ids| t.select_row(ids[0], row).unwrap(),
                seed,
                eps,
                rtol,
                atol,
            )
        }),
        prim!("slice_cols", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = dims(&mut rng, 2);
            let a = uniform(&mut rng, d.clone(), -2.0, 2.0);
            let start = rng.gen_range(0..d[1]);
            let len = rng.gen_range(1..=d[1] - start);
            check_against_fd(
                &[a],
                &move |t, ids| t.slice_cols(ids[0], start, len).unwrap(),
                seed,
                eps,
                rtol,
                atol,
            )
        }),
        prim!("concat_cols", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let m = rng.gen_range(1..=8);
            let (na, nb, nc) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let a = uniform(&mut rng, vec![m, na], -2.0, 2.0);
            let b = uniform(&mut rng, vec![m, nb], -2.0, 2.0);
            let c = uniform(&mut rng, vec![m, nc], -2.0, 2.0);
            check_against_fd(
                &[a, b, c],
                &|t, ids| t.concat_cols(ids).unwrap(),
                seed,
                eps,
                rtol,
                atol,
            )
        }),
        prim!("concat_rows", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=8);
            let (ma, mb) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let a = uniform(&mut rng, vec![ma, n], -2.0, 2.0);
            let b = uniform(&mut rng, vec![mb, n], -2.0, 2.0);
            check_against_fd(
                &[a, b],
                &|t, ids| t.concat_rows(ids).unwrap(),
                seed,
                eps,
                rtol,
                atol,
            )
        }),
        prim!("cross_entropy", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let (b, c) = (rng.gen_range(1..=8), rng.gen_range(2..=8));
            let logits = uniform(&mut rng, vec![b, c], -2.0, 2.0);
            let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            check_against_fd(
                &[logits],
                &move |t, ids| t.cross_entropy(ids[0], &targets).unwrap(),
                seed,
                eps,
                rtol,
                atol,
            )
        }),
        prim!("conv2d", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let (bsz, cin, f) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3));
            let hw = rng.gen_range(4..=7);
            let k = rng.gen_range(2..=3);
            let stride = rng.gen_range(1..=2);
            let x = uniform(&mut rng, vec![bsz, cin, hw, hw], -1.0, 1.0);
            let w = uniform(&mut rng, vec![f, cin, k, k], -1.0, 1.0);
            let b = uniform(&mut rng, vec![f], -1.0, 1.0);
            check_against_fd(
                &[x, w, b],
                &move |t, ids| t.conv2d(ids[0], ids[1], ids[2], stride).unwrap(),
                seed,
                eps,
                rtol,
                atol,
            )
        }),
        prim!("maxpool2d", |seed, eps, rtol, atol| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let (bsz, c) = (1, rng.gen_range(1..=2));
            let hw = rng.gen_range(4..=7);
            let kernel = rng.gen_range(2..=3);
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=1);
            let x = distinct_values(&mut rng, vec![bsz, c, hw, hw]);
            check_against_fd(
                &[x],
                &move |t, ids| t.maxpool2d(ids[0], kernel, stride, padding).unwrap(),
                seed,
                eps,
                rtol,
                atol,
            )
        }),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Actor,
    Critic,
}

/// All parameters of a net flattened into one vector, in visit order.
pub fn flat_params(net: &TransformerNet) -> Tensor {
    let mut data = Vec::new();
    net.for_each_param(&mut |_, t| data.extend_from_slice(t.data()));
    Tensor::from_vec(data)
}

/// Writes a flat vector back into the net's parameters.
pub fn set_params(net: &mut TransformerNet, flat: &Tensor) {
    let mut offset = 0;
    net.for_each_param_mut(&mut |_, t| {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
        offset += n;
    });
    assert_eq!(offset, flat.numel());
}

/// Finite-difference check of a full actor or critic pass at shrunken
/// dimensions: gradients w.r.t. every parameter, the input tokens, and
/// (for the critic) the action.
pub fn gradcheck_net(kind: NetKind, seed: u64, eps: f64, rtol: f64, atol: f64) -> bool {
    let cfg = TransformerConfig::tiny();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let net = match kind {
        NetKind::Actor => TransformerNet::actor(cfg, seed),
        NetKind::Critic => TransformerNet::critic(cfg, seed),
    };
    let tokens = uniform(&mut rng, vec![cfg.seq_len, cfg.input_dim], -1.0, 1.0);
    let action = uniform(&mut rng, vec![1, 4], 0.0, 1.0);
    let read_row = rng.gen_range(0..cfg.seq_len);
    let out_dim = match kind {
        NetKind::Actor => 4,
        NetKind::Critic => 1,
    };
    let w = random_weights(vec![1, out_dim], seed);

    // analytic gradients for parameters, tokens and action at once
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let tid = tape.leaf(&tokens.clone().with_grad());
    let aid = tape.leaf(&action.clone().with_grad());
    let out = match kind {
        NetKind::Actor => net.actor_forward_t(&mut tape, &bound, tid, read_row).unwrap().0,
        NetKind::Critic => net.critic_forward_t(&mut tape, &bound, tid, aid).unwrap().0,
    };
    let loss = scalarize(&mut tape, out, &w);
    let grads = tape.backward(loss).expect("scalar loss");
    let mut analytic_params = Vec::new();
    for &id in bound.ids() {
        analytic_params.extend_from_slice(grads.get(id).data());
    }
    let analytic_params = Tensor::from_vec(analytic_params);

    let eval_with = |params: &Tensor, tokens: &Tensor, action: &Tensor| -> f64 {
        let mut net2 = net.clone();
        set_params(&mut net2, params);
        let mut tape = Tape::new();
        let bound = net2.bind(&mut tape, false);
        let tid = tape.constant(tokens);
        let aid = tape.constant(action);
        let out = match kind {
            NetKind::Actor => net2.actor_forward_t(&mut tape, &bound, tid, read_row).unwrap().0,
            NetKind::Critic => net2.critic_forward_t(&mut tape, &bound, tid, aid).unwrap().0,
        };
        let loss = scalarize(&mut tape, out, &w);
        tape.value(loss)[0]
    };

    let params0 = flat_params(&net);
    let fd_params = finite_diff_grad(|p| eval_with(p, &tokens, &action), &params0, eps);
    if !grads_close(&analytic_params, &fd_params, rtol, atol) {
        return false;
    }

    let fd_tokens = finite_diff_grad(|t| eval_with(&params0, t, &action), &tokens, eps);
    if !grads_close(&grads.get(tid), &fd_tokens, rtol, atol) {
        return false;
    }

    if kind == NetKind::Critic {
        let fd_action = finite_diff_grad(|a| eval_with(&params0, &tokens, a), &action, eps);
        if !grads_close(&grads.get(aid), &fd_action, rtol, atol) {
            return false;
        }
    }
    true
}

/// Random mid-episode state: `k` filled IMR slots, zeros beyond.
pub fn random_state(rng: &mut ChaCha12Rng) -> EnvState {
    let mut state = EnvState::initial((1, 28, 28));
    let k = rng.gen_range(0..=MAX_LAYERS);
    state.layer_count = k;
    state.last_accuracy = rng.gen_range(0.1..1.0);
    let dim = trlhpo::env::IMR_DIM;
    let slots = state.slots_mut();
    for row in 0..k {
        for j in 0..dim {
            slots[row * dim + j] = rng.gen_range(-1.0..1.0);
        }
    }
    state
}
