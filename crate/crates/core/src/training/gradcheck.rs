use serde::Serialize;

use super::{surrogate_gradients, training_input};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::instance::{generate_atsp_instance, generate_instance, Distribution, ProblemInstance, ProblemKind};
use crate::model::{rollout_on_tape, Ctx, EncodeInput, Model, ModelConfig, Policy, RolloutOptions};
use crate::rng::derive_seed;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Smallest step tried when `STEP` straddles a ReLU kink.
const MIN_STEP: f64 = 1e-9;
/// Denominator floor of the relative error. Forward-pass rounding makes the
/// central difference at `STEP` uncertain by roughly 1e-9 in absolute terms,
/// so gradients far below this floor are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
const NODES: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct ArrayReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub loss: f64,
    /// Euclidean norm of the analytic gradient; zero when every trajectory
    /// had the same reward.
    pub gradient_norm: f64,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Share of coordinates with relative error below [`TOLERANCE`].
    pub fraction_within: f64,
    /// Coordinates where the step was reduced to stay on one smooth piece.
    pub reduced_steps: usize,
    /// Coordinates where even the smallest step straddled a kink.
    pub unresolved_kinks: usize,
    pub arrays: Vec<ArrayReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Surrogate loss for fixed routes, with the ReLU activation pattern of the pass.
fn replay_loss(model: &Model<f64>, inst: &ProblemInstance, input: &EncodeInput, routes: &[Vec<usize>], adv: &[f64]) -> Result<(f64, Vec<bool>)> {
    let opts = RolloutOptions { n_starts: routes.len(), policy: Policy::Replay(routes.to_vec()), input: input.clone(), sample_seed: 0, trace: false };
    let mut tape = Tape::new();
    let (b, _) = {
        let mut ctx = Ctx::new(&mut tape, &model.params, &model.config);
        rollout_on_tape(&mut ctx, inst, &opts)?
    };
    let loss = -adv.iter().zip(&b.log_prob_sums).map(|(a, l)| a * l).sum::<f64>() / routes.len() as f64;
    Ok((loss, tape.relu_pattern()))
}

/// Compares analytic and central-difference gradients of the surrogate loss
/// on one sampled batch of a 5-node instance, in double precision.
pub fn gradcheck(config: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    let inst_seed = derive_seed(seed, 0x6C, 0);
    let inst = match config.problem {
        ProblemKind::Atsp => generate_atsp_instance(NODES, inst_seed)?,
        ProblemKind::Cvrp => generate_instance(ProblemKind::Cvrp, NODES - 1, Distribution::Uniform, inst_seed)?,
        ProblemKind::Tsp => generate_instance(ProblemKind::Tsp, NODES, Distribution::Uniform, inst_seed)?,
    };
    let input = training_input(&model, inst.n, seed)?;
    let opts = RolloutOptions {
        n_starts: inst.customer_count(),
        policy: Policy::Sample,
        input: input.clone(),
        sample_seed: derive_seed(seed, 0x6C, 1),
        trace: false,
    };
    let batch = model.rollout_with(&inst, &opts)?;
    let mean = batch.rewards.iter().sum::<f64>() / batch.len() as f64;
    let adv: Vec<f64> = batch.rewards.iter().map(|r| r - mean).collect();
    let (loss, analytic) = surrogate_gradients(&model, &inst, &input, &batch.routes, &adv)?;

    let mut arrays = Vec::new();
    let (_, base_pattern) = replay_loss(&model, &inst, &input, &batch.routes, &adv)?;
    let (mut total, mut within, mut worst) = (0usize, 0usize, 0.0f64);
    let (mut reduced, mut unresolved) = (0usize, 0usize);
    for id in 0..model.params.len() {
        let name = model.params.name(id).to_string();
        let count = model.params.get(id).len();
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for k in 0..count {
            let orig = model.params.get(id).data[k];
            let mut h = STEP;
            let numeric = loop {
                model.params.get_mut(id).data[k] = orig + h;
                let (up, pu) = replay_loss(&model, &inst, &input, &batch.routes, &adv)?;
                model.params.get_mut(id).data[k] = orig - h;
                let (down, pd) = replay_loss(&model, &inst, &input, &batch.routes, &adv)?;
                model.params.get_mut(id).data[k] = orig;
                let smooth = pu == base_pattern && pd == base_pattern;
                if smooth || h / 10.0 < MIN_STEP {
                    unresolved += usize::from(!smooth);
                    reduced += usize::from(h < STEP);
                    break (up - down) / (2.0 * h);
                }
                h /= 10.0;
            };
            let a = analytic[id].data[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
            within += usize::from(rel < TOLERANCE);
        }
        total += count;
        worst = worst.max(max_rel);
        arrays.push(ArrayReport { name, coordinates: count, max_rel_error: max_rel, max_abs_error: max_abs });
    }
    let gradient_norm = analytic.iter().flat_map(|t| t.data.iter()).map(|x| x * x).sum::<f64>().sqrt();
    Ok(GradcheckReport {
        seed,
        loss,
        gradient_norm,
        coordinates: total,
        max_rel_error: worst,
        fraction_within: if total == 0 { 1.0 } else { within as f64 / total as f64 },
        reduced_steps: reduced,
        unresolved_kinks: unresolved,
        arrays,
    })
}
