//! Batch evaluation against reference solutions, and ablation configs.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{cvrp_greedy_reference, held_karp, nearest_neighbor, two_opt, HELD_KARP_MAX_N};
use crate::error::{Error, Result};
use crate::instance::{ProblemInstance, ProblemKind};
use crate::model::{augmented_solve, InputVariant, Model, ModelConfig};
use crate::report::SolveReport;
use crate::solution::optimality_gap;
use crate::tensor::Scalar;

pub use crate::model::instance_label;

#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    /// Held-Karp; every instance must have at most 16 nodes.
    Exact,
    /// 2-opt from the nearest-neighbour tour (TSP), or the greedy
    /// sweep-plus-2-opt construction (CVRP).
    TwoOpt,
    /// Known lengths keyed by instance label.
    File(BTreeMap<String, f64>),
}

impl Reference {
    pub fn name(&self) -> &'static str {
        match self {
            Reference::Exact => "exact",
            Reference::TwoOpt => "two_opt",
            Reference::File(_) => "file",
        }
    }
}

/// Reference length for one instance.
pub fn reference_length(instance: &ProblemInstance, reference: &Reference) -> Result<f64> {
    match reference {
        Reference::Exact => Ok(held_karp(instance)?.length),
        Reference::TwoOpt => match instance.kind {
            ProblemKind::Tsp => Ok(two_opt(instance, &nearest_neighbor(instance, 0)?)?.length),
            ProblemKind::Cvrp => Ok(cvrp_greedy_reference(instance)?.length),
            ProblemKind::Atsp => Err(Error::Unsupported("2-opt reference needs a symmetric instance".into())),
        },
        Reference::File(map) => {
            let id = instance_label(instance);
            map.get(&id).copied().ok_or_else(|| Error::Data(format!("no reference length for instance {id}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Aggregate: mean length, mean of per-instance gaps, total seconds.
    pub summary: SolveReport,
    pub instances: Vec<SolveReport>,
}

/// Solves every instance with `n_aug` augmentations and compares against
/// `reference`. Reported time excludes the reference solver.
pub fn evaluate<T: Scalar>(model: &Model<T>, set: &[ProblemInstance], n_aug: usize, reference: &Reference, seed: u64) -> Result<EvalReport> {
    if let Reference::Exact = reference {
        if let Some(big) = set.iter().find(|i| i.n > HELD_KARP_MAX_N) {
            return Err(Error::TooLarge { n: big.n, limit: HELD_KARP_MAX_N });
        }
    }
    if let Reference::File(map) = reference {
        let missing: Vec<String> = set.iter().map(instance_label).filter(|id| !map.contains_key(id)).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("missing reference lengths for: {}", missing.join(", "))));
        }
    }
    let mut instances = Vec::with_capacity(set.len());
    for inst in set {
        let mut r = augmented_solve(model, inst, n_aug, seed)?;
        let reference_len = reference_length(inst, reference)?;
        r.reference = Some(reference_len);
        r.gap = Some(optimality_gap(r.length, reference_len)?);
        instances.push(r);
    }
    let mut summary = summarize(&instances, "eformer", n_aug);
    summary.meta.insert("reference".into(), serde_json::json!(reference.name()));
    Ok(EvalReport { summary, instances })
}

/// Aggregate of per-instance reports: mean length, mean gap, summed time.
pub fn summarize(reports: &[SolveReport], method: &str, n_aug: usize) -> SolveReport {
    let k = reports.len();
    let mean = |f: &dyn Fn(&SolveReport) -> f64| if k == 0 { 0.0 } else { reports.iter().map(f).sum::<f64>() / k as f64 };
    let mut s = SolveReport::new(format!("aggregate:{k}"), method, n_aug, mean(&|r| r.length), reports.iter().map(|r| r.seconds).sum());
    if k > 0 && reports.iter().all(|r| r.gap.is_some()) {
        s.gap = Some(mean(&|r| r.gap.unwrap()));
        s.reference = Some(mean(&|r| r.reference.unwrap_or(f64::NAN)));
    }
    s.meta.insert("instances".into(), serde_json::json!(k));
    s.meta.insert("gap_aggregation".into(), serde_json::json!("mean_of_instance_gaps"));
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoPrecoder,
    NoNodeEncoder,
    NoGraphEncoder,
    NoGcn,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Full, Ablation::NoPrecoder, Ablation::NoNodeEncoder, Ablation::NoGraphEncoder, Ablation::NoGcn];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPrecoder => "no_precoder",
            Ablation::NoNodeEncoder => "no_node_encoder",
            Ablation::NoGraphEncoder => "no_graph_encoder",
            Ablation::NoGcn => "no_gcn",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Argument(format!("unknown ablation `{s}`")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Configuration with one module disabled. `n_aug` is the augmentation
/// count the caller intends to evaluate with.
pub fn ablate(config: &ModelConfig, variant: Ablation, n_aug: usize) -> Result<ModelConfig> {
    let mut c = config.clone();
    match variant {
        Ablation::Full => {}
        Ablation::NoPrecoder => {
            if c.problem == ProblemKind::Atsp {
                return Err(Error::Config("no_precoder needs coordinate features, which ATSP lacks".into()));
            }
            if c.variant == InputVariant::EdgeInput && n_aug > 1 {
                return Err(Error::Config("without the precoder no instance augmentation is available; use n_aug = 1".into()));
            }
            c.use_precoder = false;
        }
        Ablation::NoNodeEncoder => c.use_node_encoder = false,
        Ablation::NoGraphEncoder => c.use_graph_encoder = false,
        Ablation::NoGcn => {
            if !c.use_graph_encoder {
                return Err(Error::Config("no_gcn needs the graph encoder".into()));
            }
            c.gcn_layers = 0;
            if c.mlp_layers == 0 {
                return Err(Error::Config("no_gcn with zero MLP layers leaves an empty graph encoder".into()));
            }
        }
    }
    c.validate()?;
    Ok(c)
}
