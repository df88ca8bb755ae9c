use std::time::Instant;

use super::forward::EncodeInput;
use super::rollout::{Policy, RolloutOptions};
use super::{sample_onehot_assignment, InputVariant, Model, CANONICAL_ASSIGNMENT_SEED};
use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::report::SolveReport;
use crate::rng::derive_seed;
use crate::tensor::Scalar;

const AUG_STREAM: u64 = 0xA5;

/// The eight symmetries of the unit square; index 0 is the identity.
pub fn dihedral(index: usize, p: [f64; 2]) -> [f64; 2] {
    let [x, y] = p;
    match index % 8 {
        0 => [x, y],
        1 => [y, x],
        2 => [1.0 - x, y],
        3 => [x, 1.0 - y],
        4 => [1.0 - x, 1.0 - y],
        5 => [y, 1.0 - x],
        6 => [1.0 - y, x],
        _ => [1.0 - y, 1.0 - x],
    }
}

/// Instance name used in reports.
pub fn instance_label(instance: &ProblemInstance) -> String {
    match instance.meta.get("name").and_then(|v| v.as_str()) {
        Some(name) => name.to_string(),
        None => format!("{}-{}-{}", instance.kind, instance.n, instance.seed),
    }
}

/// Encoder input of augmentation run `r` (run 0 is the canonical input).
pub(crate) fn augmentation_input<T: Scalar>(model: &Model<T>, instance: &ProblemInstance, run: usize, master_seed: u64) -> Result<EncodeInput> {
    let c = &model.config;
    match c.variant {
        InputVariant::EdgeInput if c.precoder_active() => {
            let seed = if run == 0 { CANONICAL_ASSIGNMENT_SEED } else { derive_seed(master_seed, AUG_STREAM, run as u64) };
            Ok(EncodeInput { assignment: Some(sample_onehot_assignment(instance.n, c.onehot_pool, seed)?), coords: None })
        }
        _ => {
            if run == 0 {
                return Ok(EncodeInput::default());
            }
            let coords = instance.coords.as_ref().ok_or_else(|| Error::Config("coordinate augmentation needs coordinates".into()))?;
            Ok(EncodeInput { assignment: None, coords: Some(coords.iter().map(|&p| dihedral(run, p)).collect()) })
        }
    }
}

/// Largest augmentation count the configuration supports.
pub fn max_augmentations<T: Scalar>(model: &Model<T>) -> usize {
    let c = &model.config;
    if c.precoder_active() {
        usize::MAX
    } else if c.variant == InputVariant::NodeInput {
        8
    } else {
        1
    }
}

/// Greedy multi-start rollouts over `n_aug` encoder inputs; keeps the best tour.
pub fn augmented_solve<T: Scalar>(model: &Model<T>, instance: &ProblemInstance, n_aug: usize, seed: u64) -> Result<SolveReport> {
    if n_aug == 0 {
        return Err(Error::Argument("n_aug must be at least 1".into()));
    }
    let limit = max_augmentations(model);
    if n_aug > limit {
        return Err(Error::Config(format!("this configuration supports at most {limit} augmentations, got {n_aug}")));
    }
    let start = Instant::now();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for run in 0..n_aug {
        let input = augmentation_input(model, instance, run, seed)?;
        let opts = RolloutOptions { n_starts: instance.customer_count(), policy: Policy::Greedy, input, sample_seed: seed, trace: false };
        let batch = model.rollout_with(instance, &opts)?;
        let (i, len) = batch.best().expect("at least one trajectory");
        if best.as_ref().map_or(true, |(b, _)| len < *b) {
            best = Some((len, batch.routes[i].clone()));
        }
    }
    let (length, route) = best.expect("n_aug >= 1");
    let mut report = SolveReport::new(instance_label(instance), "eformer", n_aug, length, start.elapsed().as_secs_f64());
    report.route = route;
    Ok(report)
}
