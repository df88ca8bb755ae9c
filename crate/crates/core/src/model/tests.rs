use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::instance::{generate_atsp_instance, generate_instance, Distribution, ProblemKind};
use crate::solution::check_feasible;
use crate::sparse::knn_sparsify;

fn tiny(kind: ProblemKind, seed: u64) -> Model<f64> {
    Model::new(ModelConfig::tiny(kind), seed).unwrap()
}

fn instance(kind: ProblemKind, n: usize, seed: u64) -> ProblemInstance {
    match kind {
        ProblemKind::Atsp => generate_atsp_instance(n, seed).unwrap(),
        ProblemKind::Cvrp => generate_instance(kind, n - 1, Distribution::Uniform, seed).unwrap(),
        ProblemKind::Tsp => generate_instance(kind, n, Distribution::Uniform, seed).unwrap(),
    }
}

fn random_embeddings(n: usize, h: usize, seed: u64) -> Tensor<f64> {
    use rand::Rng as _;
    let mut rng = seeded(seed);
    Tensor::from_vec(n, h, (0..n * h).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn onehot_assignment_is_distinct_and_seeded() {
    let a = sample_onehot_assignment(3, 4, 1).unwrap();
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|&i| i < 4));
    let mut s = a.clone();
    s.sort();
    s.dedup();
    assert_eq!(s.len(), 3);
    let mut full = sample_onehot_assignment(6, 6, 9).unwrap();
    full.sort();
    assert_eq!(full, (0..6).collect::<Vec<_>>());
    assert!(matches!(sample_onehot_assignment(5, 4, 0), Err(Error::Capacity(_))));
    let first = sample_onehot_assignment(10, 64, 0).unwrap();
    assert!((1..50).any(|s| sample_onehot_assignment(10, 64, s).unwrap() != first));
}

#[test]
fn precoder_shape_softmax_and_assignment_sensitivity() {
    for kind in [ProblemKind::Tsp, ProblemKind::Cvrp, ProblemKind::Atsp] {
        let m = tiny(kind, 2);
        let inst = instance(kind, 7, 3);
        let a = sample_onehot_assignment(7, 32, 0).unwrap();
        let b = sample_onehot_assignment(7, 32, 1).unwrap();
        let ha = m.precoder_forward(&inst, &a).unwrap();
        assert_eq!(ha.shape(), (7, 8));
        let hb = m.precoder_forward(&inst, &b).unwrap();
        assert!(ha.max_abs_diff(&hb) > 0.0);
        for w in m.precoder_attention(&inst, &a).unwrap() {
            for r in 0..w.rows {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn precoder_rejects_bad_input() {
    let m = tiny(ProblemKind::Tsp, 0);
    let mut inst = instance(ProblemKind::Tsp, 5, 0);
    assert!(matches!(m.precoder_forward(&inst, &[0, 1, 2, 3, 40]), Err(Error::Capacity(_))));
    inst.dist.set(0, 1, f64::NAN);
    assert!(matches!(m.precoder_forward(&inst, &[0, 1, 2, 3, 4]), Err(Error::Numeric(_))));
}

#[test]
fn graph_encoder_reduces_to_residual_stream_with_zero_weights() {
    let mut c = ModelConfig::tiny(ProblemKind::Tsp);
    c.gcn_layers = 2;
    c.mlp_layers = 0;
    let mut m = Model::<f64>::new(c, 4).unwrap();
    let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        if name.starts_with("gcn.") && [".w1", ".w2", ".w3", ".w4", ".w5"].iter().any(|s| name.ends_with(s)) {
            let id = m.params.id(name).unwrap();
            m.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    // random node-norm shifts survive as ReLU(beta) added per layer
    for l in 0..2 {
        let id = m.params.id(&format!("gcn.{l}.bn_node.beta")).unwrap();
        let beta = random_embeddings(1, 8, 10 + l as u64);
        *m.params.get_mut(id) = beta;
    }
    let inst = instance(ProblemKind::Tsp, 6, 1);
    let sparse = knn_sparsify(&inst, 3).unwrap();
    let h = random_embeddings(6, 8, 2);
    let out = m.graph_encoder_forward(&h, &sparse).unwrap();
    let a1 = m.params.by_name("gcn.a1").unwrap();
    let mut expect = crate::tensor::matmul(&h, false, a1, false);
    for l in 0..2 {
        let beta = m.params.by_name(&format!("gcn.{l}.bn_node.beta")).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                let v = expect.at(r, c) + beta.at(0, c).max(0.0);
                expect.set(r, c, v);
            }
        }
    }
    assert!(out.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn edge_gates_lie_in_open_unit_interval() {
    let m = tiny(ProblemKind::Tsp, 5);
    let inst = instance(ProblemKind::Tsp, 5, 6);
    let sparse = knn_sparsify(&inst, 3).unwrap();
    let gates = m.edge_gates(&random_embeddings(5, 8, 7), &sparse).unwrap();
    assert_eq!(gates.shape(), (5 * 4, 8));
    assert!(gates.data.iter().all(|&g| g.is_finite() && g > 0.0 && g < 1.0));
    for node in 0..5 {
        for ch in 0..8 {
            let total: f64 = (0..4).map(|e| gates.at(node * 4 + e, ch)).sum();
            assert!(total < 1.0);
        }
    }
    let out = m.graph_encoder_forward(&random_embeddings(5, 8, 7), &sparse).unwrap();
    assert_eq!(out.shape(), (5, 8));
    let wrong = knn_sparsify(&inst, 2).unwrap();
    assert!(matches!(m.graph_encoder_forward(&random_embeddings(5, 8, 7), &wrong), Err(Error::Numeric(_))));
}

#[test]
fn node_encoder_without_layers_is_identity() {
    let mut c = ModelConfig::tiny(ProblemKind::Tsp);
    c.node_encoder_layers = 0;
    let m = Model::<f64>::new(c, 0).unwrap();
    let h = random_embeddings(5, 8, 1);
    assert_eq!(m.node_encoder_forward(&h).unwrap(), h);
}

#[test]
fn node_encoder_shape_and_attention_rows() {
    let m = tiny(ProblemKind::Tsp, 3);
    let h = random_embeddings(6, 8, 4);
    assert_eq!(m.node_encoder_forward(&h).unwrap().shape(), (6, 8));
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &m.params, &m.config);
    let x = ctx.tape.constant(h);
    forward::node_encoder(&mut ctx, x);
    let att = ctx.tap("node_encoder.attention").unwrap();
    let w = ctx.tape.attention_weights(att).unwrap();
    assert_eq!(w.len(), 2);
    for head in w {
        for r in 0..head.rows {
            assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn step(first: Vec<usize>, last: Vec<usize>, mask: Vec<bool>) -> StepContext {
    StepContext { first, last, mask: Arc::new(mask), load_ratio: None }
}

#[test]
fn decoder_masks_and_normalizes() {
    let m = tiny(ProblemKind::Tsp, 8);
    let inst = instance(ProblemKind::Tsp, 5, 9);
    let mask = vec![true, false, false, true, false, true, true, true, true, false];
    let out = m.decoder_step(&inst, &EncodeInput::default(), &step(vec![0, 5], vec![3, 5], mask.clone())).unwrap();
    for r in 0..2 {
        let p = &out.probs[r];
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for j in 0..5 {
            if mask[r * 5 + j] {
                assert_eq!(p[j], 0.0);
            }
            assert!(out.scores[r][j].abs() <= 10.0);
        }
    }
    assert_eq!(out.probs[1][4], 1.0);
    let all = vec![true; 5];
    assert!(matches!(m.decoder_step(&inst, &EncodeInput::default(), &step(vec![0], vec![0], all)), Err(Error::Decode(_))));
}

#[test]
fn greedy_tsp_rollout_returns_valid_permutations() {
    let m = tiny(ProblemKind::Tsp, 1);
    let inst = instance(ProblemKind::Tsp, 5, 2);
    let b = m.rollout(&inst, 5, DecodeMode::Greedy, 0).unwrap();
    assert_eq!(b.len(), 5);
    for (t, r) in b.routes.iter().enumerate() {
        assert_eq!(r[0], t);
        check_feasible(&inst, r).unwrap();
    }
    assert!(b.step_log_probs.iter().all(|s| s.len() == 4));
    assert!(matches!(m.rollout(&inst, 6, DecodeMode::Greedy, 0), Err(Error::Argument(_))));
}

#[test]
fn cvrp_rollout_respects_capacity_and_depot_rules() {
    let m = tiny(ProblemKind::Cvrp, 1);
    let inst = instance(ProblemKind::Cvrp, 11, 5);
    let opts = RolloutOptions { n_starts: 10, policy: Policy::Sample, input: EncodeInput::default(), sample_seed: 3, trace: true };
    let b = m.rollout_with(&inst, &opts).unwrap();
    for (t, r) in b.routes.iter().enumerate() {
        assert_eq!(&r[..2], &[0, t + 1]);
        check_feasible(&inst, r).unwrap();
    }
    for s in b.trace.as_ref().unwrap() {
        for r in 0..10 {
            if s.active[r] {
                assert!((s.probs[r].iter().sum::<f64>() - 1.0).abs() < 1e-6);
            } else {
                assert_eq!(s.probs[r][0], 1.0);
            }
        }
    }
}

/// Independent per-step recomputation of each trajectory's log-probability.
fn oracle_log_prob(m: &Model<f64>, inst: &ProblemInstance, route: &[usize]) -> f64 {
    let n = inst.n;
    let cvrp = inst.kind == ProblemKind::Cvrp;
    let cap = inst.capacity.unwrap_or(0);
    let forced = if cvrp { 2 } else { 1 };
    let mut visited = vec![false; n];
    let mut load = 0;
    for &v in &route[..forced] {
        visited[v] = true;
        load += inst.demand(v);
    }
    let mut total = 0.0;
    for pos in forced..route.len() {
        let cur = route[pos - 1];
        let mask: Vec<bool> = (0..n)
            .map(|j| {
                if cvrp && j == 0 {
                    cur == 0
                } else {
                    visited[j] || (cvrp && inst.demand(j) + load > cap)
                }
            })
            .collect();
        let ratio = cvrp.then(|| vec![(cap - load) as f64 / cap as f64]);
        let ctx = StepContext { first: vec![route[0]], last: vec![cur], mask: Arc::new(mask), load_ratio: ratio };
        let p = m.decoder_step(inst, &EncodeInput::default(), &ctx).unwrap().probs[0][route[pos]];
        total += p.ln();
        let a = route[pos];
        visited[a] = true;
        load = if a == 0 { 0 } else { load + inst.demand(a) };
    }
    total
}

#[test]
fn sampled_log_probs_match_replay_and_stepwise_oracle() {
    for kind in [ProblemKind::Tsp, ProblemKind::Atsp, ProblemKind::Cvrp] {
        let m = tiny(kind, 11);
        let inst = instance(kind, 7, 12);
        let t = inst.customer_count();
        let opts = RolloutOptions { n_starts: t, policy: Policy::Sample, input: EncodeInput::default(), sample_seed: 4, trace: false };
        let b = m.rollout_with(&inst, &opts).unwrap();
        let replay = RolloutOptions { policy: Policy::Replay(b.routes.clone()), ..opts };
        let r = m.rollout_with(&inst, &replay).unwrap();
        assert_eq!(r.routes, b.routes);
        for i in 0..t {
            assert!((r.log_prob_sums[i] - b.log_prob_sums[i]).abs() < 1e-5);
            let oracle = oracle_log_prob(&m, &inst, &b.routes[i]);
            assert!((oracle - b.log_prob_sums[i]).abs() < 1e-5, "{kind}: {oracle} vs {}", b.log_prob_sums[i]);
            let direct: f64 = b.step_log_probs[i].iter().sum();
            assert!((direct - b.log_prob_sums[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let m = tiny(ProblemKind::Tsp, 2);
    let inst = instance(ProblemKind::Tsp, 8, 3);
    let a = m.rollout(&inst, 8, DecodeMode::Sample, 5).unwrap();
    let b = m.rollout(&inst, 8, DecodeMode::Sample, 5).unwrap();
    assert_eq!(a.routes, b.routes);
    assert_eq!(a.log_prob_sums, b.log_prob_sums);
}

#[test]
fn first_step_probabilities_are_permutation_equivariant() {
    let m = tiny(ProblemKind::Atsp, 6);
    let inst = instance(ProblemKind::Atsp, 6, 7);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut pinst = inst.clone();
    pinst.dist = inst.dist.permuted(&perm);
    let a = sample_onehot_assignment(6, 32, 2).unwrap();
    let mut pa = vec![0; 6];
    for i in 0..6 {
        pa[perm[i]] = a[i];
    }
    let input = EncodeInput { assignment: Some(a), coords: None };
    let pinput = EncodeInput { assignment: Some(pa), coords: None };
    let base = m.decoder_step(&inst, &input, &step(vec![6, 2], vec![6, 2], [vec![false; 6], (0..6).map(|j| j == 2).collect()].concat())).unwrap();
    let pmask: Vec<bool> = (0..6).map(|j| j == perm[2]).collect();
    let moved = m.decoder_step(&pinst, &pinput, &step(vec![6, perm[2]], vec![6, perm[2]], [vec![false; 6], pmask].concat())).unwrap();
    for r in 0..2 {
        for j in 0..6 {
            assert!((base.probs[r][j] - moved.probs[r][perm[j]]).abs() < 1e-5);
        }
    }
}

#[test]
fn silenced_node_stream_matches_single_stream_model() {
    let m = tiny(ProblemKind::Tsp, 13);
    let mut silenced = m.clone();
    for role in ["w1_n", "w2_n", "w3_n", "wk_n", "placeholder_n"] {
        let id = silenced.params.id(&format!("decoder.{role}")).unwrap();
        silenced.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
    let mut c = m.config.clone();
    c.use_node_encoder = false;
    let mut single = ParamStore::empty();
    for (name, t) in m.params.iter() {
        if !name.starts_with("node_encoder") && !name.ends_with("_n") {
            single.insert(name, t.clone());
        }
    }
    let single = Model::from_parts(c, single).unwrap();
    let inst = instance(ProblemKind::Tsp, 6, 1);
    let ctx = step(vec![1, 6], vec![4, 6], [(0..6).map(|j| j == 1 || j == 4).collect::<Vec<_>>(), vec![false; 6]].concat());
    let a = silenced.decoder_step(&inst, &EncodeInput::default(), &ctx).unwrap();
    let b = single.decoder_step(&inst, &EncodeInput::default(), &ctx).unwrap();
    for r in 0..2 {
        for j in 0..6 {
            assert!((a.scores[r][j] - b.scores[r][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn augmentation_is_a_superset_search() {
    let m = tiny(ProblemKind::Tsp, 3);
    let inst = instance(ProblemKind::Tsp, 9, 4);
    let one = augmented_solve(&m, &inst, 1, 5).unwrap();
    let greedy = m.rollout(&inst, 9, DecodeMode::Greedy, 0).unwrap();
    assert_eq!(one.length, greedy.best().unwrap().1);
    let mut prev = one.length;
    for k in [2, 4, 8] {
        let r = augmented_solve(&m, &inst, k, 5).unwrap();
        assert!(r.length <= prev);
        check_feasible(&inst, &r.route).unwrap();
        prev = r.length;
    }
}

#[test]
fn node_variant_augments_by_symmetry_only() {
    let m = Model::<f64>::new(ModelConfig::tiny(ProblemKind::Cvrp).node_variant(), 1).unwrap();
    let inst = instance(ProblemKind::Cvrp, 8, 2);
    let r = augmented_solve(&m, &inst, 8, 0).unwrap();
    check_feasible(&inst, &r.route).unwrap();
    assert!(matches!(augmented_solve(&m, &inst, 9, 0), Err(Error::Config(_))));
    let mut c = ModelConfig::tiny(ProblemKind::Tsp);
    c.use_precoder = false;
    let m = Model::<f64>::new(c, 1).unwrap();
    let inst = instance(ProblemKind::Tsp, 8, 2);
    assert!(augmented_solve(&m, &inst, 1, 0).is_ok());
    assert!(matches!(augmented_solve(&m, &inst, 2, 0), Err(Error::Config(_))));
}

#[test]
fn dihedral_maps_preserve_distances() {
    let p = [0.2, 0.7];
    let q = [0.9, 0.1];
    let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut images = Vec::new();
    for k in 0..8 {
        assert!((d(dihedral(k, p), dihedral(k, q)) - d(p, q)).abs() < 1e-12);
        images.push(dihedral(k, p));
    }
    images.sort_by(|a, b| a.partial_cmp(b).unwrap());
    images.dedup();
    assert_eq!(images.len(), 8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_decoding_step_is_a_valid_distribution(kind in 0usize..3, n in 4usize..9, seed in 0u64..1000, node in any::<bool>()) {
        let kind = [ProblemKind::Tsp, ProblemKind::Cvrp, ProblemKind::Atsp][kind];
        let mut c = ModelConfig::tiny(kind);
        if node && kind != ProblemKind::Atsp {
            c = c.node_variant();
        }
        let m = Model::<f64>::new(c, seed).unwrap();
        let inst = instance(kind, n, seed);
        let t = inst.customer_count();
        let opts = RolloutOptions { n_starts: t, policy: Policy::Sample, input: EncodeInput::default(), sample_seed: seed, trace: true };
        let b = m.rollout_with(&inst, &opts).unwrap();
        for r in &b.routes {
            prop_assert!(check_feasible(&inst, r).is_ok());
        }
        for s in b.trace.unwrap() {
            for r in 0..t {
                let total: f64 = s.probs[r].iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                for j in 0..inst.n {
                    if s.mask[r][j] {
                        prop_assert_eq!(s.probs[r][j], 0.0);
                    } else {
                        prop_assert!(s.scores[r][j].abs() <= 10.0);
                    }
                }
            }
        }
    }
}
