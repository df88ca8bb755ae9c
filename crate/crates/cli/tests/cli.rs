use std::path::Path;
use std::process::{Command, Output};

fn efr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efr")).args(args).env_remove("EFR_SEED").output().expect("run efr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        let o = efr(&["generate", "--kind", "tsp", "--n", "20", "--count", "10", "--seed", "7", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let set = eformer::vrplib::read_instances(&a).unwrap();
    assert_eq!(set.len(), 10);
    assert!(set.iter().all(|i| i.n == 20));
}

#[test]
fn env_seed_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    efr(&["generate", "--kind", "cvrp", "--n", "6", "--seed", "3", "--out", p(&a)]);
    let o = Command::new(env!("CARGO_BIN_EXE_efr")).args(["generate", "--kind", "cvrp", "--n", "6", "--seed", "99", "--out", p(&b)]).env("EFR_SEED", "3").output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    let o = efr(&["solve", "--input", "x.json"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&efr(&["frobnicate"])), 1);
    assert_eq!(code(&efr(&["generate", "--kind", "tsp", "--n", "5", "--colour", "red", "--out", "x"])), 1);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = efr(&["solve", "--checkpoint", p(&dir.path().join("missing.ckpt")), "--input", "x.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes() {
    let o = efr(&["gradcheck", "--kind", "tsp"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(line["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn train_solve_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "problem = tsp\nsize = 6\nepochs = 1\ninstances_per_epoch = 16\nbatch_size = 8\nembed_dim = 8\nheads = 2\nff_dim = 16\nnode_encoder_layers = 1\ngcn_layers = 1\nmlp_layers = 1\nk = 3\nonehot_pool = 32\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("log.jsonl");
    let o = efr(&["train", "--config", p(&cfg), "--lr", "0.001", "--out", p(&ckpt), "--log", p(&log)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("effective_config") && stderr.contains("\"lr\":0.001"), "{stderr}");
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1);

    let set = dir.path().join("set.json");
    efr(&["generate", "--kind", "tsp", "--n", "6", "--count", "3", "--out", p(&set)]);
    let report = dir.path().join("r.jsonl");
    let o = efr(&["solve", "--checkpoint", p(&ckpt), "--input", p(&set), "--aug", "2", "--report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.contains("\"gap\":null")));

    let o = efr(&["eval", "--checkpoint", p(&ckpt), "--set", p(&set), "--reference", "exact"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["gap"].as_f64().unwrap() >= 0.0);
    assert!(summary["meta"]["config"]["model"]["embed_dim"] == 8);
}

#[test]
fn ablate_rejects_augmenting_without_precoder() {
    let dir = tempfile::tempdir().unwrap();
    let o = efr(&["ablate", "--variant", "no_precoder", "--aug", "8", "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn parse_library_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data");
    let out = dir.path().join("lib.json");
    let o = efr(&["parse", p(&data.join("berlin52.tsp")), p(&data.join("eil22.vrp")), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let set = eformer::vrplib::read_instances(&out).unwrap();
    assert_eq!(set.iter().map(|i| i.n).collect::<Vec<_>>(), vec![52, 22]);
    let bad = dir.path().join("bad.tsp");
    std::fs::write(&bad, "NAME: x\nWHATEVER: 1\n").unwrap();
    assert_eq!(code(&efr(&["parse", p(&bad), "--out", p(&out)])), 2);
}
