//! `efr`: generate data, train, solve, evaluate, ablate, gradcheck, parse.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
//! `EFR_SEED`, when set, replaces every seed given on the command line or in
//! a config file.

mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eformer::inference::{ablate, evaluate, Ablation, Reference};
use eformer::instance::{generate_instance, Distribution, ProblemInstance, ProblemKind};
use eformer::model::{augmented_solve, Model};
use eformer::report::SolveReport;
use eformer::rng::derive_seed;
use eformer::training::{gradcheck, load_checkpoint, Checkpoint, Trainer};
use eformer::vrplib::{load_instances, parse_cvrplib, parse_tsplib, write_instances, write_report};
use eformer::{Error, Result};
use serde_json::json;

use config::{read_pairs, RunConfig};

const GENERATE_STREAM: u64 = 0x60;

#[derive(Parser)]
#[command(name = "efr", version, about = "Edge-input transformer solver for TSP, CVRP and ATSP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write random instances to an efr-inst-1 file.
    Generate {
        #[arg(long)]
        kind: ProblemKind,
        /// Nodes (TSP/ATSP) or customers (CVRP).
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value = "uniform")]
        distribution: Distribution,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Solve instances with a trained model.
    Solve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Instance file (.tsp, .vrp or efr-inst-1) or a directory of them.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        aug: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append JSON-lines reports here instead of printing them.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a model against reference lengths.
    Eval(EvalArgs),
    /// Train and evaluate a model with one module removed.
    Ablate {
        #[arg(long)]
        variant: Ablation,
        #[command(flatten)]
        train: TrainArgs,
        /// Evaluation set; defaults to 200 fresh instances of the training size.
        #[arg(long)]
        eval_set: Option<PathBuf>,
        #[arg(long, default_value = "auto")]
        reference: String,
        #[arg(long, default_value_t = 1)]
        aug: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient check on a tiny double-precision model.
    Gradcheck {
        /// tsp, cvrp, atsp or all.
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Check the node-input variant instead of the edge-input model.
        #[arg(long)]
        node: bool,
    },
    /// Convert TSPLIB / CVRPLIB files to an efr-inst-1 file.
    Parse {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<ProblemKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Model input: edge or node.
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Any other configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training log (JSON lines); defaults to stderr.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    set: PathBuf,
    /// exact, two_opt, auto, or a JSON file mapping instance names to lengths.
    #[arg(long, default_value = "auto")]
    reference: String,
    #[arg(long, default_value_t = 1)]
    aug: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn seed_override(seed: u64) -> Result<u64> {
    match std::env::var("EFR_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| Error::Config(format!("EFR_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(seed),
    }
}

fn emit_config(command: &str, config: serde_json::Value) {
    eprintln!("{}", json!({ "command": command, "effective_config": config }));
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut pairs = match &a.config {
        Some(p) => read_pairs(p)?,
        None => Vec::new(),
    };
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    flag("problem", a.kind.map(|k| k.to_string()));
    flag("size", a.n.map(|v| v.to_string()));
    flag("epochs", a.epochs.map(|v| v.to_string()));
    flag("instances_per_epoch", a.instances.map(|v| v.to_string()));
    flag("batch_size", a.batch_size.map(|v| v.to_string()));
    flag("lr", a.lr.map(|v| v.to_string()));
    flag("embed_dim", a.embed_dim.map(|v| v.to_string()));
    flag("variant", a.input.clone());
    flag("seed", a.seed.map(|v| v.to_string()));
    flag("workers", a.workers.map(|v| v.to_string()));
    for s in &a.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Ok(s) = std::env::var("EFR_SEED") {
        pairs.push(("seed".into(), s));
    }
    RunConfig::resolve(&pairs)
}

fn train(a: &TrainArgs, ablation: Option<Ablation>, aug: usize) -> Result<(Model<f32>, RunConfig)> {
    let mut rc = run_config(a)?;
    if let Some(v) = ablation {
        rc.model = ablate(&rc.model, v, aug)?;
    }
    let mut cfg = rc.to_json();
    if let Some(v) = ablation {
        cfg["ablation"] = json!(v.name());
    }
    emit_config("train", cfg);
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model_config != rc.model {
                return Err(Error::Incompatible(format!("{} was trained with a different model configuration", p.display())));
            }
            Trainer::resume(ck, rc.train.clone())?
        }
        None => Trainer::new(Model::new(rc.model.clone(), rc.train.seed)?, rc.train.clone())?,
    };
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(File::options().create(true).append(true).open(p).map_err(|e| Error::Io { path: p.clone(), source: e })?)),
        None => Box::new(std::io::stderr()),
    };
    while trainer.epoch < rc.train.epochs {
        let stats = trainer.train_epoch()?;
        writeln!(log, "{}", serde_json::to_string(&stats).expect("stats serialize")).map_err(|e| Error::Io { path: "<log>".into(), source: e })?;
        log.flush().ok();
        // checkpoint every epoch so an interrupted run can resume
        let mut ck = Checkpoint::from_trainer(&trainer);
        if let Some(v) = ablation {
            ck.meta.insert("ablation".into(), json!(v.name()));
        }
        eformer::training::save_checkpoint(&ck, &a.out)?;
    }
    Ok((trainer.model, rc))
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    let ck = load_checkpoint(path)?;
    Model::from_parts(ck.model_config, ck.params)
}

fn collect_instances(input: &Path) -> Result<Vec<ProblemInstance>> {
    if input.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::Io { path: input.into(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut out = Vec::new();
        for p in entries {
            out.extend(load_instances(&p)?);
        }
        Ok(out)
    } else {
        load_instances(input)
    }
}

fn reference_for(spec: &str, set: &[ProblemInstance]) -> Result<Reference> {
    Ok(match spec {
        "exact" => Reference::Exact,
        "two_opt" | "2opt" => Reference::TwoOpt,
        "auto" => {
            let small = set.iter().all(|i| i.n <= eformer::baselines::HELD_KARP_MAX_N && i.kind != ProblemKind::Cvrp);
            if small {
                Reference::Exact
            } else {
                Reference::TwoOpt
            }
        }
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
            let map: BTreeMap<String, f64> = serde_json::from_str(&text).map_err(|e| Error::Data(format!("reference file {path}: {e}")))?;
            Reference::File(map)
        }
    })
}

fn output(reports: &[SolveReport], path: Option<&Path>) -> Result<()> {
    for r in reports {
        match path {
            Some(p) => write_report(r, p)?,
            None => println!("{}", serde_json::to_string(r).expect("report serializes")),
        }
    }
    Ok(())
}

fn eval_and_report(model: &Model<f32>, set: &[ProblemInstance], reference: &str, aug: usize, seed: u64, report: Option<&Path>, config: serde_json::Value) -> Result<()> {
    let reference = reference_for(reference, set)?;
    let mut r = evaluate(model, set, aug, &reference, seed)?;
    r.summary.meta.insert("config".into(), config);
    if let Some(p) = report {
        output(&r.instances, Some(p))?;
        write_report(&r.summary, p)?;
    }
    println!("{}", serde_json::to_string(&r.summary).expect("report serializes"));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { kind, n, count, distribution, seed, out } => {
            let seed = seed_override(seed)?;
            emit_config("generate", json!({ "kind": kind, "n": n, "count": count, "distribution": distribution, "seed": seed }));
            let set = (0..count as u64).map(|i| generate_instance(kind, n, distribution, derive_seed(seed, GENERATE_STREAM, i))).collect::<Result<Vec<_>>>()?;
            write_instances(&out, &set)
        }
        Command::Train(a) => {
            train(&a, None, 1)?;
            Ok(())
        }
        Command::Solve { checkpoint, input, aug, seed, report } => {
            let seed = seed_override(seed)?;
            let model = load_model(&checkpoint)?;
            emit_config("solve", json!({ "model": model.config, "aug": aug, "seed": seed, "checkpoint": checkpoint }));
            let mut reports = Vec::new();
            for inst in collect_instances(&input)? {
                let mut r = augmented_solve(&model, &inst, aug, seed)?;
                if let Some(scale) = inst.meta.get("scale").and_then(|s| s.as_f64()) {
                    r.meta.insert("raw_length".into(), json!(r.length * scale));
                }
                reports.push(r);
            }
            output(&reports, report.as_deref())
        }
        Command::Eval(a) => {
            let seed = seed_override(a.seed)?;
            let model = load_model(&a.checkpoint)?;
            let set = collect_instances(&a.set)?;
            let cfg = json!({ "model": model.config, "aug": a.aug, "seed": seed, "reference": a.reference, "checkpoint": a.checkpoint });
            emit_config("eval", cfg.clone());
            eval_and_report(&model, &set, &a.reference, a.aug, seed, a.report.as_deref(), cfg)
        }
        Command::Ablate { variant, train: ta, eval_set, reference, aug, report } => {
            let (model, rc) = train(&ta, Some(variant), aug)?;
            let set = match eval_set {
                Some(p) => collect_instances(&p)?,
                None => (0..200u64)
                    .map(|i| generate_instance(rc.train.problem, rc.train.size, rc.train.distribution, derive_seed(rc.train.seed, 0x61, i)))
                    .collect::<Result<Vec<_>>>()?,
            };
            let mut cfg = rc.to_json();
            cfg["ablation"] = json!(variant.name());
            cfg["aug"] = json!(aug);
            eval_and_report(&model, &set, &reference, aug, rc.train.seed, report.as_deref(), cfg)
        }
        Command::Gradcheck { kind, seed, node } => {
            let seed = seed_override(seed)?;
            let kinds: Vec<ProblemKind> = match kind.as_str() {
                "all" if node => vec![ProblemKind::Tsp, ProblemKind::Cvrp],
                "all" => vec![ProblemKind::Tsp, ProblemKind::Cvrp, ProblemKind::Atsp],
                k => vec![k.parse()?],
            };
            let mut ok = true;
            for k in kinds {
                let mut c = eformer::model::ModelConfig::tiny(k);
                if node {
                    c = c.node_variant();
                }
                emit_config("gradcheck", json!({ "model": c, "seed": seed }));
                let r = gradcheck(&c, seed)?;
                println!(
                    "{}",
                    json!({ "kind": k, "seed": seed, "coordinates": r.coordinates, "max_rel_error": r.max_rel_error, "gradient_norm": r.gradient_norm, "passed": r.passed() })
                );
                ok &= r.passed();
            }
            if ok {
                Ok(())
            } else {
                Err(Error::Numeric("gradient check exceeded tolerance 1e-4".into()))
            }
        }
        Command::Parse { files, out } => {
            let mut set = Vec::new();
            for f in &files {
                let text = std::fs::read_to_string(f).map_err(|e| Error::Io { path: f.clone(), source: e })?;
                let is_cvrp = f.extension().is_some_and(|e| e.eq_ignore_ascii_case("vrp")) || text.lines().any(|l| l.trim_start().starts_with("CAPACITY"));
                let (inst, meta) = if is_cvrp { parse_cvrplib(&text)? } else { parse_tsplib(&text)? };
                println!("{}", json!({ "file": f, "name": meta.name, "kind": inst.kind, "n": inst.n, "scale": meta.scale, "declared_optimum": meta.declared_optimum }));
                set.push(inst);
            }
            write_instances(&out, &set)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
