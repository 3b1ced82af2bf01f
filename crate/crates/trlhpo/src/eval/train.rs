//! Training-based evaluation: build the candidate, train it under a
//! fixed budget with cross-entropy + Adam, and report the validation
//! profile.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{
    DataSplit, Dataset, EvalError, EvalOutcome, Evaluate, TrainBudget, PROFILE_BATCHES,
    PROFILE_BATCH_SIZE, PROFILE_SAMPLES,
};
use crate::space::{build_model, Activation, ArchSpec, ModelPlan, PlanStep};
use crate::tensor::{Adam, Tape, Tensor, ValueId};
use crate::util::derive_seed;

/// Evaluator that actually trains each candidate on the dataset.
///
/// The validation profile is measured on a fixed, seeded shuffle of the
/// validation split (the first 32x16 samples), chosen once per run so
/// that per-layer reward deltas are comparable.
pub struct RealEvaluator {
    dataset: Arc<Dataset>,
    budget: TrainBudget,
    profile_indices: Vec<usize>,
    evals: AtomicUsize,
}

impl RealEvaluator {
    pub fn new(
        dataset: Arc<Dataset>,
        budget: TrainBudget,
        profile_seed: u64,
    ) -> Result<Self, EvalError> {
        if dataset.validation.len() < PROFILE_SAMPLES {
            return Err(EvalError::InsufficientSamples {
                need: PROFILE_SAMPLES,
                have: dataset.validation.len(),
            });
        }
        let mut indices: Vec<usize> = (0..dataset.validation.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(profile_seed, &["profile-shuffle"]));
        for i in (1..indices.len()).rev() {
            indices.swap(i, rng.gen_range(0..=i));
        }
        indices.truncate(PROFILE_SAMPLES);
        Ok(RealEvaluator {
            dataset,
            budget,
            profile_indices: indices,
            evals: AtomicUsize::new(0),
        })
    }

    pub fn budget(&self) -> &TrainBudget {
        &self.budget
    }

    /// Trains one candidate and measures it. Exposed separately from the
    /// trait so tests can drive explicit budgets.
    pub fn train_candidate(
        &self,
        arch: &ArchSpec,
        budget: &TrainBudget,
    ) -> Result<EvalOutcome, EvalError> {
        let start = Instant::now();
        let plan = build_model(arch, 10)?;
        let mut model = CandidateModel::init(plan, derive_seed(budget.seed, &["init", &arch.digest()]));
        let mut opt = Adam::new(budget.lr);
        let train = &self.dataset.train;
        let n = train.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut diverged = false;
        'epochs: for epoch in 0..budget.epochs {
            let seed = derive_seed(budget.seed, &["epoch-shuffle", &arch.digest(), &epoch.to_string()]);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for chunk in order.chunks(budget.batch_size) {
                let loss = model.train_step(train, chunk, &mut opt);
                if !loss.is_finite() {
                    diverged = true;
                    break 'epochs;
                }
            }
        }
        let outcome = if diverged {
            EvalOutcome {
                overall_accuracy: 0.0,
                batch_accuracies: vec![0.0; PROFILE_BATCHES],
                train_time_s: start.elapsed().as_secs_f64(),
                param_count: model.plan.param_count(),
                diverged: true,
            }
        } else {
            let correct_overall = model.correct_count(
                &self.dataset.validation,
                &(0..self.dataset.validation.len()).collect::<Vec<_>>(),
            );
            let overall = correct_overall as f64 / self.dataset.validation.len() as f64;
            let batch_accuracies =
                validate_batches(&model, &self.dataset.validation, &self.profile_indices);
            EvalOutcome {
                overall_accuracy: overall,
                batch_accuracies,
                train_time_s: start.elapsed().as_secs_f64(),
                param_count: model.plan.param_count(),
                diverged: false,
            }
        };
        Ok(outcome)
    }
}

impl Evaluate for RealEvaluator {
    fn evaluate(&self, arch: &ArchSpec) -> Result<EvalOutcome, EvalError> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.train_candidate(arch, &self.budget)
    }

    fn evaluations(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }
}

/// Accuracy on each of the first 32 consecutive 16-sample batches of the
/// fixed validation shuffle.
pub fn validate_batches(model: &CandidateModel, split: &DataSplit, indices: &[usize]) -> Vec<f64> {
    assert!(indices.len() >= PROFILE_SAMPLES);
    indices[..PROFILE_SAMPLES]
        .chunks(PROFILE_BATCH_SIZE)
        .map(|batch| model.correct_count(split, batch) as f64 / batch.len() as f64)
        .collect()
}

/// A candidate network instantiated from a plan: ordered named
/// parameters plus the forward wiring.
pub struct CandidateModel {
    pub plan: ModelPlan,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl CandidateModel {
    pub fn init(plan: ModelPlan, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (i, step) in plan.steps.iter().enumerate() {
            match *step {
                PlanStep::Conv { in_channels, filters, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = filters * kernel * kernel;
                    names.push(format!("step{i}.w"));
                    params.push(xavier(&mut rng, vec![filters, in_channels, kernel, kernel], fan_in, fan_out));
                    names.push(format!("step{i}.b"));
                    params.push(Tensor::zeros(vec![filters]).with_grad());
                }
                PlanStep::Dense { inputs, outputs, bias, .. } => {
                    names.push(format!("step{i}.w"));
                    params.push(xavier(&mut rng, vec![inputs, outputs], inputs, outputs));
                    if bias {
                        names.push(format!("step{i}.b"));
                        params.push(Tensor::zeros(vec![outputs]).with_grad());
                    }
                }
                _ => {}
            }
        }
        CandidateModel { plan, names, params }
    }

    /// Forward over a batch of image indices; returns the logits id.
    fn forward(
        &self,
        tape: &mut Tape,
        bound: &[ValueId],
        split: &DataSplit,
        indices: &[usize],
    ) -> ValueId {
        let bsz = indices.len();
        let (c, h, w) = self.plan.input_shape;
        let mut data = Vec::with_capacity(bsz * c * h * w);
        for &i in indices {
            data.extend_from_slice(split.image(i));
        }
        let x = Tensor::new(vec![bsz, c, h, w], data).expect("batch shape");
        let mut cur = tape.constant(&x);
        let mut pi = 0;
        for step in &self.plan.steps {
            match *step {
                PlanStep::Conv { stride, .. } => {
                    let w_id = bound[pi];
                    let b_id = bound[pi + 1];
                    pi += 2;
                    cur = tape.conv2d(cur, w_id, b_id, stride).expect("conv shapes checked");
                    cur = tape.relu(cur);
                }
                PlanStep::Pool { kernel, stride, padding } => {
                    cur = tape.maxpool2d(cur, kernel, stride, padding).expect("pool shapes checked");
                }
                PlanStep::Flatten { len } => {
                    cur = tape.reshape(cur, vec![bsz, len]).expect("flatten shapes checked");
                }
                PlanStep::Dense { bias, activation, .. } => {
                    let w_id = bound[pi];
                    pi += 1;
                    cur = tape.matmul(cur, w_id).expect("dense shapes checked");
                    if bias {
                        let b_id = bound[pi];
                        pi += 1;
                        cur = tape.add(cur, b_id).expect("bias broadcast");
                    }
                    cur = apply_activation(tape, cur, activation);
                }
            }
        }
        cur
    }

    fn bind(&self, tape: &mut Tape) -> Vec<ValueId> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    /// One optimizer step on a minibatch; returns the loss.
    fn train_step(&mut self, split: &DataSplit, indices: &[usize], opt: &mut Adam) -> f64 {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = self.forward(&mut tape, &bound, split, indices);
        let targets: Vec<usize> = indices.iter().map(|&i| split.labels[i] as usize).collect();
        let loss = tape.cross_entropy(logits, &targets).expect("logit shape");
        let loss_val = tape.value(loss)[0];
        if !loss_val.is_finite() {
            return loss_val;
        }
        let grads = tape.backward(loss).expect("scalar loss");
        opt.begin_step();
        for ((name, param), id) in self.names.iter().zip(&mut self.params).zip(&bound) {
            opt.update(name, param, &grads.get(*id));
        }
        loss_val
    }

    /// Number of correct argmax predictions over the given samples.
    pub fn correct_count(&self, split: &DataSplit, indices: &[usize]) -> usize {
        let mut correct = 0;
        for chunk in indices.chunks(128) {
            let mut tape = Tape::new();
            let bound: Vec<ValueId> = self.params.iter().map(|p| tape.constant(p)).collect();
            let logits = self.forward(&mut tape, &bound, split, chunk);
            let vals = tape.value(logits);
            let classes = self.plan.num_classes;
            for (r, &i) in chunk.iter().enumerate() {
                let row = &vals[r * classes..(r + 1) * classes];
                let pred = argmax(row);
                if pred == split.labels[i] as usize {
                    correct += 1;
                }
            }
        }
        correct
    }
}

fn apply_activation(tape: &mut Tape, id: ValueId, act: Activation) -> ValueId {
    match act {
        Activation::None => id,
        Activation::Relu => tape.relu(id),
        Activation::LeakyRelu => tape.leaky_relu(id, 0.01),
        Activation::Tanh => tape.tanh(id),
        Activation::Sigmoid => tape.sigmoid(id),
        Activation::Elu => tape.elu(id),
        Activation::Gelu => tape.gelu(id),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn xavier(rng: &mut ChaCha12Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).expect("xavier shape").with_grad()
}
