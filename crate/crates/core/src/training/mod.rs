//! REINFORCE with the multi-start shared baseline.

mod checkpoint;
mod gradcheck;

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck, GradcheckReport};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::instance::{generate_instance, Distribution, ProblemInstance, ProblemKind};
use crate::model::{rollout_on_tape, sample_onehot_assignment, Ctx, EncodeInput, InputVariant, Model, ParamStore, Policy, RolloutBatch, RolloutOptions};
use crate::rng::derive_seed;
use crate::tensor::{Scalar, Tensor};

const STREAM_INSTANCE: u64 = 0x10;
const STREAM_ASSIGN: u64 = 0x11;
const STREAM_SAMPLE: u64 = 0x12;
const STREAM_BATCH: u64 = 0x13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub problem: ProblemKind,
    /// Node count (TSP/ATSP) or customer count (CVRP).
    pub size: usize,
    pub distribution: Distribution,
    pub epochs: usize,
    pub instances_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epoch indices (0-based) from which one more decay factor applies.
    /// Empty means a single milestone at the first epoch starting at or
    /// after 90% of training.
    pub milestones: Vec<usize>,
    pub seed: u64,
    pub gradient_clip: Option<f64>,
    pub workers: usize,
}

impl TrainConfig {
    pub fn new(problem: ProblemKind, size: usize) -> Self {
        TrainConfig {
            problem,
            size,
            distribution: Distribution::Uniform,
            epochs: 1,
            instances_per_epoch: 100_000,
            batch_size: 64,
            lr: 1e-4,
            lr_decay: 0.1,
            milestones: Vec::new(),
            seed: 1234,
            gradient_clip: None,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.instances_per_epoch == 0 {
            return Err(Error::Config("instances_per_epoch must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Some(c) = self.gradient_clip {
            if !(c > 0.0) {
                return Err(Error::Config("gradient_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn effective_milestones(&self) -> Vec<usize> {
        if self.milestones.is_empty() {
            vec![(self.epochs * 9).div_ceil(10)]
        } else {
            self.milestones.clone()
        }
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let crossed = self.effective_milestones().iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(crossed as i32)
    }

    /// Number of optimizer steps per epoch (the last batch may be short).
    pub fn steps_per_epoch(&self) -> usize {
        self.instances_per_epoch.div_ceil(self.batch_size)
    }
}

/// Surrogate loss and shared-baseline advantages for a batch of instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss {
    pub loss: f64,
    /// Per instance, per trajectory.
    pub advantages: Vec<Vec<f64>>,
}

/// `-mean_i(a_i log p(tau_i))` per instance with `a_i = f(tau_i) - mean_j f(tau_j)`,
/// averaged over instances.
pub fn reinforce_loss(batch: &[RolloutBatch]) -> Result<Loss> {
    let mut total = 0.0;
    let mut advantages = Vec::with_capacity(batch.len());
    for (b, rb) in batch.iter().enumerate() {
        let t = rb.rewards.len();
        if t < 2 {
            return Err(Error::Baseline(format!("instance {b} has {t} trajectories; the shared baseline needs at least 2")));
        }
        let mean = rb.rewards.iter().sum::<f64>() / t as f64;
        let adv: Vec<f64> = rb.rewards.iter().map(|r| r - mean).collect();
        total += -adv.iter().zip(&rb.log_prob_sums).map(|(a, l)| a * l).sum::<f64>() / t as f64;
        advantages.push(adv);
    }
    let loss = if batch.is_empty() { 0.0 } else { total / batch.len() as f64 };
    Ok(Loss { loss, advantages })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = |p: &ParamStore<f32>| p.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(params), v: zeros(params) }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (id, g) in grads.iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + (1.0 - b1) * gk;
                v.data[k] = b2 * v.data[k] + (1.0 - b2) * gk * gk;
                p.data[k] -= step_size * m.data[k] / (v.data[k].sqrt() + eps);
            }
        }
    }
}

/// Encoder input used for one training instance.
pub(crate) fn training_input<T: Scalar>(model: &Model<T>, n: usize, seed: u64) -> Result<EncodeInput> {
    if model.config.precoder_active() {
        Ok(EncodeInput { assignment: Some(sample_onehot_assignment(n, model.config.onehot_pool, derive_seed(seed, STREAM_ASSIGN, 0))?), coords: None })
    } else {
        Ok(EncodeInput::default())
    }
}

/// Gradients of `-mean_i(a_i log p(route_i))` for fixed routes, one tensor
/// per parameter array (zeros where nothing flowed).
pub fn surrogate_gradients<T: Scalar>(model: &Model<T>, instance: &ProblemInstance, input: &EncodeInput, routes: &[Vec<usize>], advantages: &[f64]) -> Result<(f64, Vec<Tensor<T>>)> {
    let opts = RolloutOptions { n_starts: routes.len(), policy: Policy::Replay(routes.to_vec()), input: input.clone(), sample_seed: 0, trace: false };
    let mut tape = Tape::new();
    let (batch, logp) = {
        let mut ctx = Ctx::new(&mut tape, &model.params, &model.config);
        rollout_on_tape(&mut ctx, instance, &opts)?
    };
    let t = routes.len() as f64;
    let loss = -advantages.iter().zip(&batch.log_prob_sums).map(|(a, l)| a * l).sum::<f64>() / t;
    let seed = Tensor::from_f64(routes.len(), 1, &advantages.iter().map(|a| -a / t).collect::<Vec<_>>());
    Ok((loss, collect_grads(&tape, &model.params, logp, seed)))
}

fn collect_grads<T: Scalar>(tape: &Tape<T>, params: &ParamStore<T>, out: crate::autodiff::Var, seed: Tensor<T>) -> Vec<Tensor<T>> {
    let grads = tape.backward(vec![(out, seed)]);
    let mut per_param: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
    for (id, var) in tape.param_bindings() {
        if let Some(g) = &grads[var.index()] {
            per_param[id].add_assign(g);
        }
    }
    per_param
}

/// Result of one sampled rollout with its gradient contribution.
struct InstanceResult {
    mean_length: f64,
    loss: f64,
    grads: Vec<Tensor<f32>>,
}

fn train_instance(model: &Model<f32>, instance: &ProblemInstance, seed: u64, weight: f64) -> Result<InstanceResult> {
    let input = training_input(model, instance.n, seed)?;
    let opts = RolloutOptions {
        n_starts: instance.customer_count(),
        policy: Policy::Sample,
        input,
        sample_seed: derive_seed(seed, STREAM_SAMPLE, 0),
        trace: false,
    };
    let mut tape = Tape::new();
    let (batch, logp) = {
        let mut ctx = Ctx::new(&mut tape, &model.params, &model.config);
        rollout_on_tape(&mut ctx, instance, &opts)?
    };
    let loss = reinforce_loss(std::slice::from_ref(&batch))?;
    let t = batch.len() as f64;
    let seed_grad: Vec<f64> = loss.advantages[0].iter().map(|a| -a / t * weight).collect();
    let grads = collect_grads(&tape, &model.params, logp, Tensor::from_f64(batch.len(), 1, &seed_grad));
    Ok(InstanceResult { mean_length: batch.lengths.iter().sum::<f64>() / t, loss: loss.loss, grads })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_len: f64,
    pub mean_reward: f64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Owns the policy and optimizer state across epochs.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.config.validate()?;
        if model.config.problem != config.problem {
            return Err(Error::Config(format!("model is configured for {}, training data is {}", model.config.problem, config.problem)));
        }
        if model.config.variant == InputVariant::EdgeInput && model.config.precoder_active() {
            let n = if config.problem == ProblemKind::Cvrp { config.size + 1 } else { config.size };
            if n > model.config.onehot_pool {
                return Err(Error::Capacity(format!("training size {n} exceeds one-hot pool {}", model.config.onehot_pool)));
            }
        }
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.workers)))?,
            )
        } else {
            None
        };
        let adam = Adam::new(&model.params);
        Ok(Trainer { model, config, adam, epoch: 0, pool })
    }

    /// Seed of step `step` in epoch `epoch`.
    pub fn batch_seed(&self, epoch: usize, step: usize) -> u64 {
        derive_seed(self.config.seed, STREAM_BATCH, (epoch * self.config.steps_per_epoch() + step) as u64)
    }

    fn run_batch(&self, instances: &[(ProblemInstance, u64)], weight: f64) -> Vec<Result<InstanceResult>> {
        let work = |(inst, seed): &(ProblemInstance, u64)| train_instance(&self.model, inst, *seed, weight);
        match &self.pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                instances.par_iter().map(work).collect()
            }),
            None => instances.iter().map(work).collect(),
        }
    }

    /// One gradient step on `count` fresh instances.
    fn step(&mut self, batch_seed: u64, count: usize, lr: f64) -> Result<(f64, f64)> {
        let c = &self.config;
        let instances = (0..count)
            .map(|i| {
                let s = derive_seed(batch_seed, STREAM_INSTANCE, i as u64);
                generate_instance(c.problem, c.size, c.distribution, s).map(|inst| (inst, s))
            })
            .collect::<Result<Vec<_>>>()?;
        let results = self.run_batch(&instances, 1.0 / count as f64);
        let mut grads: Vec<Tensor<f32>> = self.model.params.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        let (mut len_sum, mut loss_sum) = (0.0, 0.0);
        // fixed reduction order: instance index
        for r in results {
            let r = r?;
            len_sum += r.mean_length;
            loss_sum += r.loss;
            for (g, rg) in grads.iter_mut().zip(&r.grads) {
                g.add_assign(rg);
            }
        }
        let loss = loss_sum / count as f64;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numeric(format!("non-finite loss or gradient in batch with seed {batch_seed}")));
        }
        if let Some(max_norm) = self.config.gradient_clip {
            let norm = grads.iter().flat_map(|g| g.data.iter()).map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = (max_norm / norm) as f32;
                grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|x| *x *= s));
            }
        }
        self.adam.update(&mut self.model.params, &grads, lr);
        if !self.model.params.all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite after batch with seed {batch_seed}")));
        }
        Ok((len_sum, loss_sum))
    }

    /// Runs the next epoch.
    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let start = Instant::now();
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let steps = self.config.steps_per_epoch();
        let (mut len_sum, mut loss_sum) = (0.0, 0.0);
        let mut done = 0;
        for step in 0..steps {
            let count = self.config.batch_size.min(self.config.instances_per_epoch - done);
            let (l, ls) = self.step(self.batch_seed(epoch, step), count, lr)?;
            len_sum += l;
            loss_sum += ls;
            done += count;
        }
        self.epoch += 1;
        let mean_len = len_sum / done as f64;
        Ok(EpochStats { epoch, mean_len, mean_reward: -mean_len, loss: loss_sum / done as f64, lr, seconds: start.elapsed().as_secs_f64() })
    }

    /// Runs the remaining epochs, appending one JSON line per epoch to `log`.
    pub fn train(&mut self, mut log: Option<&mut dyn std::io::Write>) -> Result<Vec<EpochStats>> {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let stats = self.train_epoch()?;
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&stats).expect("stats serialize");
                writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
            }
            all.push(stats);
        }
        Ok(all)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&Checkpoint::from_trainer(self), path)
    }

    pub fn resume(ck: Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = Model::from_parts(ck.model_config.clone(), ck.params)?;
        let mut t = Trainer::new(model, config)?;
        if let Some(adam) = ck.adam {
            if adam.m.len() != t.model.params.len() {
                return Err(Error::Incompatible("optimizer state does not match parameters".into()));
            }
            t.adam = adam;
        }
        t.epoch = ck.epoch;
        Ok(t)
    }
}
