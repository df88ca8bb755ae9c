use eformer::baselines::{held_karp, nearest_neighbor, two_opt};
use eformer::inference::{evaluate, Reference};
use eformer::instance::{generate_instance, Distribution, ProblemInstance, ProblemKind};
use eformer::model::{augmented_solve, Model, ModelConfig};
use eformer::solution::{optimality_gap, solution_length};
use eformer::training::{TrainConfig, Trainer};
use eformer::vrplib::{instances_from_str, instances_to_string, parse_cvrplib, parse_tsplib};
use proptest::prelude::*;

#[test]
fn smoke_training_shortens_tours() {
    let model = Model::<f32>::new(ModelConfig::tiny(ProblemKind::Tsp), 11).unwrap();
    let mut c = TrainConfig::new(ProblemKind::Tsp, 10);
    c.epochs = 2;
    c.instances_per_epoch = 2000;
    c.seed = 11;
    let stats = Trainer::new(model, c).unwrap().train(None).unwrap();
    assert!(stats[1].mean_len < stats[0].mean_len, "{} then {}", stats[0].mean_len, stats[1].mean_len);
}

#[test]
fn library_instances_run_through_the_model() {
    let (berlin, meta) = parse_tsplib(include_str!("data/berlin52.tsp")).unwrap();
    let tiny = Model::<f32>::new(ModelConfig::tiny(ProblemKind::Tsp), 1).unwrap();
    assert!(matches!(evaluate(&tiny, std::slice::from_ref(&berlin), 1, &Reference::TwoOpt, 0), Err(eformer::Error::Capacity(_))));
    let model = Model::<f32>::new(ModelConfig { onehot_pool: 64, ..ModelConfig::tiny(ProblemKind::Tsp) }, 1).unwrap();
    let r = evaluate(&model, std::slice::from_ref(&berlin), 2, &Reference::TwoOpt, 0).unwrap();
    assert_eq!(r.instances[0].instance, "berlin52");
    assert!(r.instances[0].length > 0.0);
    assert!(meta.raw_length(r.instances[0].length) > 7000.0);

    let (eil, _) = parse_cvrplib(include_str!("data/eil22.vrp")).unwrap();
    let model = Model::<f32>::new(ModelConfig::tiny(ProblemKind::Cvrp), 1).unwrap();
    let r = augmented_solve(&model, &eil, 1, 0).unwrap();
    assert!((solution_length(&eil, &r.route).unwrap() - r.length).abs() < 1e-12);
}

fn tsplib_text(points: &[(f64, f64)]) -> String {
    let mut s = format!("NAME: p\nTYPE: TSP\nDIMENSION: {}\nEDGE_WEIGHT_TYPE: EUC_2D\nNODE_COORD_SECTION\n", points.len());
    for (i, (x, y)) in points.iter().enumerate() {
        s.push_str(&format!("{} {x} {y}\n", i + 1));
    }
    s.push_str("EOF\n");
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalization_preserves_gaps(
        pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 6..9),
        scale in 1.0f64..5000.0,
        shift in -1000.0f64..1000.0,
    ) {
        let raw: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x * scale + shift, y * scale - shift)).collect();
        let (inst, meta) = parse_tsplib(&tsplib_text(&raw)).unwrap();
        let opt = held_karp(&inst).unwrap();
        let heur = nearest_neighbor(&inst, 0).unwrap();
        let normalized_gap = optimality_gap(heur.length, opt.length).unwrap();
        // the same two tours measured directly in file units
        let raw_len = |route: &[usize]| -> f64 {
            (0..route.len()).map(|i| {
                let (a, b) = (raw[route[i]], raw[route[(i + 1) % route.len()]]);
                (a.0 - b.0).hypot(a.1 - b.1)
            }).sum()
        };
        let raw_gap = optimality_gap(raw_len(&heur.route), raw_len(&opt.route)).unwrap();
        prop_assert!((normalized_gap - raw_gap).abs() <= 1e-9 * raw_gap.abs().max(1.0));
        prop_assert!((meta.raw_length(opt.length) - raw_len(&opt.route)).abs() <= 1e-9 * raw_len(&opt.route));
        let c = inst.coords.as_ref().unwrap();
        prop_assert!(c.iter().all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])));
    }

    #[test]
    fn container_round_trip_is_bitwise(kind in prop::sample::select(vec![ProblemKind::Tsp, ProblemKind::Cvrp, ProblemKind::Atsp]), n in 5usize..30, seed: u64) {
        let set: Vec<ProblemInstance> = vec![generate_instance(kind, n, Distribution::Uniform, seed).unwrap()];
        let back = instances_from_str(&instances_to_string(&set)).unwrap();
        prop_assert_eq!(&back, &set);
        for (a, b) in back[0].dist.as_slice().iter().zip(set[0].dist.as_slice()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn two_opt_never_beats_exact(seed: u64) {
        let inst = generate_instance(ProblemKind::Tsp, 9, Distribution::Uniform, seed).unwrap();
        let exact = held_karp(&inst).unwrap().length;
        let local = two_opt(&inst, &nearest_neighbor(&inst, 0).unwrap()).unwrap().length;
        prop_assert!(local >= exact - 1e-12);
    }
}
