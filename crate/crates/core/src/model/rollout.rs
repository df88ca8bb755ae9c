//! Multi-start trajectory construction.

use std::sync::Arc;

use rand::Rng as _;

use super::forward::{decode_step, encode, Ctx, EncodeInput, Encoded, StepContext};
use super::Model;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::instance::{ProblemInstance, ProblemKind};
use crate::rng::{seeded, Rng};
use crate::solution::solution_length;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug)]
pub enum Policy {
    Sample,
    Greedy,
    /// Teacher-forces the given routes (one per trajectory).
    Replay(Vec<Vec<usize>>),
}

impl From<DecodeMode> for Policy {
    fn from(m: DecodeMode) -> Self {
        match m {
            DecodeMode::Sample => Policy::Sample,
            DecodeMode::Greedy => Policy::Greedy,
        }
    }
}

/// Per-step decoder outputs, recorded on request.
#[derive(Clone, Debug)]
pub struct StepTrace {
    /// `t x n` selection probabilities.
    pub probs: Vec<Vec<f64>>,
    /// `t x n` clipped scores before masking.
    pub scores: Vec<Vec<f64>>,
    /// `t x n` mask (`true` = excluded).
    pub mask: Vec<Vec<bool>>,
    /// Trajectories that still had a decision to make at this step.
    pub active: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub routes: Vec<Vec<usize>>,
    pub lengths: Vec<f64>,
    /// `-length` per trajectory.
    pub rewards: Vec<f64>,
    /// Sum of log-probabilities of the decoded (non-forced) actions.
    pub log_prob_sums: Vec<f64>,
    /// Log-probability of each decoded action, per trajectory.
    pub step_log_probs: Vec<Vec<f64>>,
    pub trace: Option<Vec<StepTrace>>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.lengths
            .iter()
            .copied()
            .enumerate()
            .fold(None, |acc, (i, l)| match acc {
                Some((_, b)) if b <= l => acc,
                _ => Some((i, l)),
            })
    }
}

#[derive(Clone, Debug)]
pub struct RolloutOptions {
    pub n_starts: usize,
    pub policy: Policy,
    pub input: EncodeInput,
    pub sample_seed: u64,
    pub trace: bool,
}

struct TrajState {
    route: Vec<usize>,
    visited: Vec<bool>,
    remaining: u32,
    done: bool,
    /// Position within a replayed route.
    cursor: usize,
}

fn pick(probs: &[f64], mask: &[bool], policy: &Policy, rng: &mut Rng) -> usize {
    match policy {
        Policy::Greedy => {
            let mut best = usize::MAX;
            for (j, &p) in probs.iter().enumerate() {
                if !mask[j] && (best == usize::MAX || p > probs[best]) {
                    best = j;
                }
            }
            best
        }
        Policy::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last_ok = usize::MAX;
            for (j, &p) in probs.iter().enumerate() {
                if mask[j] {
                    continue;
                }
                last_ok = j;
                acc += p;
                if u < acc {
                    return j;
                }
            }
            last_ok
        }
        Policy::Replay(_) => unreachable!("replay actions are read from the route"),
    }
}

/// Runs `n_starts` trajectories in lockstep on `tape`. Returns the batch and
/// the `t x 1` variable holding the per-trajectory log-probability sums.
pub(crate) fn rollout_on_tape<T: Scalar>(ctx: &mut Ctx<'_, T>, instance: &ProblemInstance, opts: &RolloutOptions) -> Result<(RolloutBatch, Var)> {
    let enc = encode(ctx, instance, &opts.input)?;
    run_decoder(ctx, &enc, instance, opts)
}

pub(crate) fn run_decoder<T: Scalar>(ctx: &mut Ctx<'_, T>, enc: &Encoded, instance: &ProblemInstance, opts: &RolloutOptions) -> Result<(RolloutBatch, Var)> {
    let n = instance.n;
    let t = opts.n_starts;
    let cvrp = instance.kind == ProblemKind::Cvrp;
    let max_starts = instance.customer_count();
    if t == 0 || t > max_starts {
        return Err(Error::Argument(format!("n_starts = {t} outside 1..={max_starts}")));
    }
    if let Policy::Replay(routes) = &opts.policy {
        if routes.len() != t {
            return Err(Error::Argument(format!("{} replay routes for {t} trajectories", routes.len())));
        }
    }
    let capacity = instance.capacity.unwrap_or(0);
    let mut states: Vec<TrajState> = (0..t)
        .map(|i| {
            let mut visited = vec![false; n];
            let route = if cvrp {
                let c = match &opts.policy {
                    Policy::Replay(r) => *r[i].get(1).unwrap_or(&(i + 1)),
                    _ => i + 1,
                };
                visited[0] = true;
                visited[c] = true;
                vec![0, c]
            } else {
                let s = match &opts.policy {
                    Policy::Replay(r) => *r[i].first().unwrap_or(&i),
                    _ => i,
                };
                visited[s] = true;
                vec![s]
            };
            let remaining = if cvrp { capacity - instance.demand(route[1]) } else { 0 };
            let cursor = route.len();
            TrajState { route, visited, remaining, done: false, cursor }
        })
        .collect();
    if let Policy::Replay(routes) = &opts.policy {
        for (i, r) in routes.iter().enumerate() {
            if r.iter().any(|&v| v >= n) {
                return Err(Error::Argument(format!("replay route {i} has an out-of-range node")));
            }
        }
    }
    let mut rng = seeded(opts.sample_seed);
    let mut log_sum: Option<Var> = None;
    let mut step_log_probs = vec![Vec::new(); t];
    let mut trace = opts.trace.then(Vec::new);

    let finished = |s: &TrajState| -> bool {
        if cvrp {
            *s.route.last().unwrap() == 0 && s.visited.iter().all(|&v| v)
        } else {
            s.route.len() == n
        }
    };
    for s in states.iter_mut() {
        s.done = finished(s);
    }

    while states.iter().any(|s| !s.done) {
        let mut mask = vec![false; t * n];
        for (r, s) in states.iter().enumerate() {
            let row = &mut mask[r * n..(r + 1) * n];
            if s.done {
                row.iter_mut().for_each(|m| *m = true);
                row[if cvrp { 0 } else { s.route[0] }] = false;
                continue;
            }
            for j in 0..n {
                row[j] = s.visited[j];
            }
            if cvrp {
                for (j, m) in row.iter_mut().enumerate().skip(1) {
                    if instance.demand(j) > s.remaining {
                        *m = true;
                    }
                }
                row[0] = *s.route.last().unwrap() == 0;
            }
        }
        let first: Vec<usize> = states.iter().map(|s| s.route[0]).collect();
        let last: Vec<usize> = states.iter().map(|s| *s.route.last().unwrap()).collect();
        let load_ratio = cvrp.then(|| states.iter().map(|s| s.remaining as f64 / capacity as f64).collect());
        let mask = Arc::new(mask);
        let ctx_step = StepContext { first, last, mask: Arc::clone(&mask), load_ratio };
        let out = decode_step(ctx, enc, &ctx_step)?;
        let lp = ctx.tape.value(out.log_probs);
        let probs: Vec<Vec<f64>> = (0..t).map(|r| lp.row(r).iter().map(|&x| x.as_f64().exp()).collect()).collect();
        let mut actions = Vec::with_capacity(t);
        for (r, s) in states.iter_mut().enumerate() {
            let row_mask = &mask[r * n..(r + 1) * n];
            let a = if s.done {
                row_mask.iter().position(|&m| !m).expect("one open slot")
            } else {
                match &opts.policy {
                    Policy::Replay(routes) => {
                        let a = *routes[r].get(s.cursor).ok_or_else(|| Error::Argument(format!("replay route {r} ends early")))?;
                        if row_mask[a] {
                            return Err(Error::Decode(format!("replay route {r} selects masked node {a}")));
                        }
                        a
                    }
                    other => pick(&probs[r], row_mask, other, &mut rng),
                }
            };
            actions.push(a);
        }
        if let Some(tr) = trace.as_mut() {
            let sc = ctx.tape.value(out.scores);
            tr.push(StepTrace {
                probs: probs.clone(),
                scores: (0..t).map(|r| sc.row(r).iter().map(|x| x.as_f64()).collect()).collect(),
                mask: (0..t).map(|r| mask[r * n..(r + 1) * n].to_vec()).collect(),
                active: states.iter().map(|s| !s.done).collect(),
            });
        }
        let chosen = ctx.tape.pick_cols(out.log_probs, Arc::new(actions.clone()));
        let chosen_vals: Vec<f64> = ctx.tape.value(chosen).data.iter().map(|x| x.as_f64()).collect();
        log_sum = Some(match log_sum {
            Some(acc) => ctx.tape.add(acc, chosen),
            None => chosen,
        });
        for (r, s) in states.iter_mut().enumerate() {
            if s.done {
                continue;
            }
            let a = actions[r];
            step_log_probs[r].push(chosen_vals[r]);
            s.route.push(a);
            s.cursor += 1;
            s.visited[a] = true;
            if cvrp {
                s.remaining = if a == 0 { capacity } else { s.remaining - instance.demand(a) };
            }
            s.done = finished(s);
        }
    }
    let log_sum = match log_sum {
        Some(v) => v,
        None => ctx.tape.constant(crate::tensor::Tensor::zeros(t, 1)),
    };
    let routes: Vec<Vec<usize>> = states.into_iter().map(|s| s.route).collect();
    if let Policy::Replay(given) = &opts.policy {
        if let Some(r) = (0..t).find(|&r| given[r] != routes[r]) {
            return Err(Error::Argument(format!("replay route {r} has trailing nodes after completion")));
        }
    }
    let mut lengths = Vec::with_capacity(t);
    for r in &routes {
        let l = solution_length(instance, r).map_err(|e| Error::Decode(format!("decoded route infeasible: {e}")))?;
        lengths.push(l);
    }
    let log_prob_sums = ctx.tape.value(log_sum).data.iter().map(|x| x.as_f64()).collect();
    let rewards = lengths.iter().map(|l| -l).collect();
    Ok((RolloutBatch { routes, lengths, rewards, log_prob_sums, step_log_probs, trace }, log_sum))
}

impl<T: Scalar> Model<T> {
    pub fn rollout_with(&self, instance: &ProblemInstance, opts: &RolloutOptions) -> Result<RolloutBatch> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, &self.config);
        rollout_on_tape(&mut ctx, instance, opts).map(|(b, _)| b)
    }
}
