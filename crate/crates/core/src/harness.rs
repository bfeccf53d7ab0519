//! Command implementations behind the `hvrp` binary: run configuration,
//! instance generation, training, evaluation and parameter sweeps.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{clarke_wright, exact_oracle, gap_table, nearest_neighbor, BestKnown, GapReport, MethodResult, ORACLE_LIMIT};
use crate::decoder::{rollout_batch, DecodePolicy};
use crate::encoder::{encode_batch, BnMode};
use crate::error::{Error, Result};
use crate::instances::{generate_instance, parse_instance_file, write_instance_file, Instance};
use crate::io::{read_text, write_atomic};
use crate::model::{Ablation, Constraint, Model};
use crate::routes::Solution;
use crate::tensor::{read_container, Graph};
use crate::trainer::{chunk_by_size, log_csv, validation_set, TrainConfig, Trainer};

/// Process exit status for an error: 2 usage, 3 data or parse, 4 version.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => 2,
        Error::Parse { .. } | Error::MalformedSolution(_) | Error::InvalidArgument(_) | Error::TooLarge { .. } | Error::Io { .. } => 3,
        Error::Version(_) => 4,
        Error::Shape { .. } | Error::ContractViolation(_) => 1,
    }
}

/// Caps rayon's worker count from `HVRP_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HVRP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("HVRP_THREADS must be a positive integer, got `{v}`")))?;
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Usage(format!("unknown preset `{other}` (valid: desk, paper)"))),
        }
    }

    pub fn config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "preset",
    "epochs",
    "steps_per_epoch",
    "batch_size",
    "n",
    "capacity",
    "lr",
    "lr_decay",
    "epsilon",
    "seed",
    "val_size",
    "hidden_dim",
    "heads",
    "gat_layers",
    "hg_layers",
    "delta",
    "lambda",
    "gamma",
    "constraints",
    "r_prox",
    "clip",
    "ablation",
    "fusion_skip",
    "detach_coefficients",
    "hist_includes_depot",
];

/// Parses flat `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Usage(format!("bad value `{v}` for `{key}`")))
}

/// Builds a configuration: the preset named by a `preset` entry (desk by
/// default), then every other entry in order.
pub fn build_config(entries: &[(String, String)]) -> Result<TrainConfig> {
    let preset = entries
        .iter()
        .rev()
        .find(|(k, _)| k == "preset")
        .map(|(_, v)| Preset::parse(v))
        .transpose()?
        .unwrap_or(Preset::Desk);
    let mut cfg = preset.config();
    for (k, v) in entries {
        apply_key(&mut cfg, k, v)?;
    }
    Ok(cfg)
}

pub fn apply_key(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    let m = &mut cfg.model;
    match key {
        "preset" => {}
        "epochs" => cfg.epochs = value(key, v)?,
        "steps_per_epoch" => cfg.steps_per_epoch = value(key, v)?,
        "batch_size" => cfg.batch_size = value(key, v)?,
        "n" => cfg.n = value(key, v)?,
        "capacity" => cfg.capacity = value(key, v)?,
        "lr" => cfg.lr = value(key, v)?,
        "lr_decay" => cfg.lr_decay = value(key, v)?,
        "epsilon" => cfg.epsilon = value(key, v)?,
        "seed" => cfg.seed = value(key, v)?,
        "val_size" => cfg.val_size = value(key, v)?,
        "hidden_dim" => m.hidden_dim = value(key, v)?,
        "heads" => m.heads = value(key, v)?,
        "gat_layers" => m.gat_layers = value(key, v)?,
        "hg_layers" => m.hg_layers = value(key, v)?,
        "delta" => m.delta = value(key, v)?,
        "lambda" => m.lambda = value(key, v)?,
        "gamma" => m.gamma = value(key, v)?,
        "r_prox" => m.r_prox = value(key, v)?,
        "clip" => m.clip = value(key, v)?,
        "fusion_skip" => m.fusion_skip = value(key, v)?,
        "detach_coefficients" => m.detach_coefficients = value(key, v)?,
        "hist_includes_depot" => m.hist_includes_depot = value(key, v)?,
        "ablation" => m.ablation = Ablation::parse(v)?,
        "constraints" => {
            m.constraints = v
                .split(',')
                .map(|c| Constraint::parse(c.trim()).map_err(|e| Error::Usage(e.to_string())))
                .collect::<Result<_>>()?
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown config key `{other}`; valid keys: {}",
                CONFIG_KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

/// Record of one command invocation and the files it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub build_id: String,
    pub seed: u64,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub outputs: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn build_id() -> String {
    match option_env!("HVRP_BUILD_ID") {
        Some(id) => format!("{}+{id}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

impl RunManifest {
    fn start(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            build_id: build_id(),
            seed,
            started_unix_s: now_unix(),
            finished_unix_s: 0,
            outputs: Vec::new(),
        }
    }

    fn finish(mut self, dir: &Path) -> Result<Self> {
        self.finished_unix_s = now_unix();
        self.outputs.sort();
        self.outputs.dedup();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(&dir.join("manifest.json"), text.as_bytes())?;
        Ok(self)
    }
}

fn add_output(m: &mut RunManifest, dir: &Path, path: &Path) {
    let rel = path.strip_prefix(dir).unwrap_or(path);
    m.outputs.push(rel.to_string_lossy().into_owned());
}

pub struct GenerateArgs {
    pub nodes: usize,
    pub capacity: u32,
    pub count: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes `count` random instances, instance `i` drawn from seed `seed + i`.
pub fn cmd_generate(args: &GenerateArgs) -> Result<RunManifest> {
    let config = serde_json::json!({
        "nodes": args.nodes, "capacity": args.capacity, "count": args.count, "seed": args.seed,
    });
    let mut m = RunManifest::start("generate", config, args.seed);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for i in 0..args.count {
        let mut inst = generate_instance(args.nodes, args.capacity, args.seed.wrapping_add(i as u64))?;
        inst.name = format!("inst-{i:05}");
        let path = args.out.join(format!("{}.vrp", inst.name));
        write_atomic(&path, write_instance_file(&inst).as_bytes())?;
        add_output(&mut m, &args.out, &path);
    }
    m.finish(&args.out)
}

/// Every `.vrp` file of `dir` in file-name order.
pub fn load_instances(dir: &Path) -> Result<Vec<Instance>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vrp"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let mut inst = parse_instance_file(&read_text(p)?).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse {
                    line,
                    msg: format!("{}: {msg}", p.display()),
                },
                other => other,
            })?;
            if inst.name.is_empty() {
                inst.name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            }
            Ok(inst)
        })
        .collect()
}

pub struct TrainArgs {
    pub config: TrainConfig,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

/// Trains (or resumes) and writes checkpoints, the log and a manifest.
pub fn cmd_train(args: &TrainArgs, mut on_epoch: impl FnMut(&crate::trainer::EpochStats)) -> Result<(Trainer, RunManifest)> {
    let mut trainer = match &args.resume {
        Some(p) => Trainer::load(p)?,
        None => Trainer::new(args.config.clone())?,
    };
    let config = serde_json::to_value(&trainer.config).expect("config serializes");
    let mut m = RunManifest::start("train", config, trainer.config.seed);
    trainer.run(Some(&args.out), &mut on_epoch)?;
    for e in 1..=trainer.epoch {
        let p = args.out.join(format!("epoch-{e:03}.ckpt"));
        if p.exists() {
            add_output(&mut m, &args.out, &p);
        }
    }
    for f in ["best.ckpt", "train_log.csv"] {
        let p = args.out.join(f);
        if p.exists() {
            add_output(&mut m, &args.out, &p);
        }
    }
    let m = m.finish(&args.out)?;
    Ok((trainer, m))
}

/// Loads the actor of a training checkpoint.
pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = crate::io::read_file(path)?;
    Ok(Trainer::from_checkpoint(&read_container(&bytes)?)?.actor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Greedy,
    Sample,
}

impl Policy {
    pub fn parse(s: &str) -> Result<Policy> {
        match s {
            "greedy" => Ok(Policy::Greedy),
            "sample" => Ok(Policy::Sample),
            other => Err(Error::Usage(format!("unknown policy `{other}` (valid: greedy, sample)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    NearestNeighbor,
    ClarkeWright,
    Oracle,
}

impl Baseline {
    pub fn parse_list(s: &str) -> Result<Vec<Baseline>> {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| match t.trim() {
                "nn" => Ok(Baseline::NearestNeighbor),
                "cw" => Ok(Baseline::ClarkeWright),
                "oracle" => Ok(Baseline::Oracle),
                other => Err(Error::Usage(format!("unknown baseline `{other}` (valid: nn, cw, oracle)"))),
            })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::NearestNeighbor => "nn",
            Baseline::ClarkeWright => "cw",
            Baseline::Oracle => "oracle",
        }
    }
}

/// Lowest-cost sampled solution out of `samples` (first one on ties).
pub fn best_of_samples(model: &Model, inst: &Instance, samples: usize, rng: &mut ChaCha8Rng) -> Result<Solution> {
    let copies = vec![inst.clone(); samples.max(1)];
    let mut g = Graph::new();
    let enc = encode_batch(&mut g, model, &copies, BnMode::Eval, false)?;
    let r = rollout_batch(&mut g, model, &enc, &copies, DecodePolicy::Sample(rng), false)?;
    let mut best = r.solutions.into_iter();
    let first = best.next().expect("at least one sample");
    Ok(best.fold(first, |a, b| if b.cost < a.cost { b } else { a }))
}

/// Model solutions for every instance. Greedy decoding runs in batches of
/// same-size instances; sampling draws `samples` rollouts per instance.
pub fn model_solutions(model: &Model, insts: &[Instance], policy: Policy, samples: usize, seed: u64) -> Result<Vec<(Solution, f64)>> {
    let mut out = Vec::with_capacity(insts.len());
    match policy {
        Policy::Greedy => {
            for part in chunk_by_size(insts, 64) {
                let start = Instant::now();
                let mut g = Graph::new();
                let enc = encode_batch(&mut g, model, part, BnMode::Eval, false)?;
                let r = rollout_batch(&mut g, model, &enc, part, DecodePolicy::Greedy, false)?;
                let per = start.elapsed().as_secs_f64() * 1e3 / part.len() as f64;
                out.extend(r.solutions.into_iter().map(|s| (s, per)));
            }
        }
        Policy::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for inst in insts {
                let start = Instant::now();
                let s = best_of_samples(model, inst, samples, &mut rng)?;
                out.push((s, start.elapsed().as_secs_f64() * 1e3));
            }
        }
    }
    Ok(out)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub instances: PathBuf,
    pub policy: Policy,
    pub samples: usize,
    pub baselines: Vec<Baseline>,
    pub seed: u64,
    pub out: PathBuf,
}

fn timed(f: impl FnOnce() -> Result<Solution>) -> Result<(Solution, f64)> {
    let start = Instant::now();
    let s = f()?;
    Ok((s, start.elapsed().as_secs_f64() * 1e3))
}

/// Model and baseline costs with gaps. Gaps are measured against the
/// oracle when it was requested, otherwise against the best method.
pub fn evaluate(model: &Model, insts: &[Instance], policy: Policy, samples: usize, baselines: &[Baseline], seed: u64) -> Result<GapReport> {
    if baselines.contains(&Baseline::Oracle) {
        if let Some(big) = insts.iter().find(|i| i.n() > ORACLE_LIMIT) {
            return Err(Error::TooLarge {
                n: big.n(),
                limit: ORACLE_LIMIT,
            });
        }
    }
    let mut results = Vec::new();
    let record = |id: &str, method: &str, (s, ms): (Solution, f64)| MethodResult {
        instance_id: id.to_string(),
        method: method.to_string(),
        cost: s.cost,
        time_ms: ms,
        feasible: s.feasible,
    };
    for (inst, sol) in insts.iter().zip(model_solutions(model, insts, policy, samples, seed)?) {
        results.push(record(&inst.name, "model", sol));
    }
    for &b in baselines {
        let solved: Vec<(Solution, f64)> = insts
            .par_iter()
            .map(|inst| match b {
                Baseline::NearestNeighbor => timed(|| Ok(nearest_neighbor(inst))),
                Baseline::ClarkeWright => timed(|| Ok(clarke_wright(inst))),
                Baseline::Oracle => timed(|| exact_oracle(inst, ORACLE_LIMIT)),
            })
            .collect::<Result<_>>()?;
        for (inst, sol) in insts.iter().zip(solved) {
            results.push(record(&inst.name, b.name(), sol));
        }
    }
    let ids: Vec<String> = insts.iter().map(|i| i.name.clone()).collect();
    let mut methods = vec!["model".to_string()];
    methods.extend(baselines.iter().map(|b| b.name().to_string()));
    let best = if baselines.contains(&Baseline::Oracle) {
        BestKnown::Method("oracle".into())
    } else {
        BestKnown::BestInRun
    };
    gap_table(&ids, &methods, &results, &best)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(GapReport, RunManifest)> {
    let model = load_model(&args.checkpoint)?;
    let insts = load_instances(&args.instances)?;
    let config = serde_json::json!({
        "checkpoint": args.checkpoint,
        "instances": args.instances,
        "policy": format!("{:?}", args.policy).to_lowercase(),
        "samples": args.samples,
        "baselines": args.baselines.iter().map(|b| b.name()).collect::<Vec<_>>(),
        "model": model.config,
    });
    let mut m = RunManifest::start("eval", config, args.seed);
    let report = evaluate(&model, &insts, args.policy, args.samples, &args.baselines, args.seed)?;
    let path = args.out.join("gaps.csv");
    write_atomic(&path, report.to_csv().as_bytes())?;
    add_output(&mut m, &args.out, &path);
    let summary = summary_csv(&report);
    let spath = args.out.join("summary.csv");
    write_atomic(&spath, summary.as_bytes())?;
    add_output(&mut m, &args.out, &spath);
    Ok((report, m.finish(&args.out)?))
}

pub fn summary_csv(report: &GapReport) -> String {
    let mut s = String::from("method,mean_cost,mean_gap_pct,feasible_pct\n");
    for r in &report.summary {
        s.push_str(&format!("{},{:.6},{:.4},{:.2}\n", r.method, r.mean_cost, r.mean_gap_pct, r.feasible_pct));
    }
    s
}

pub struct SweepArgs {
    pub base: TrainConfig,
    pub deltas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Training epochs per cell.
    pub budget: usize,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub lambda: f64,
    pub validation_cost: f64,
    /// Mean hyperedge degree on the validation set under the shared
    /// initial parameters.
    pub mean_degree: f64,
    /// The same quantity after the cell's training.
    pub trained_mean_degree: f64,
}

pub const SWEEP_HEADER: &str = "delta,lambda,validation_cost,mean_degree,trained_mean_degree";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?}\n",
            r.delta, r.lambda, r.validation_cost, r.mean_degree, r.trained_mean_degree
        ));
    }
    s
}

/// Mean hyperedge degree of `model` over `insts`.
pub fn mean_degree(model: &Model, insts: &[Instance]) -> Result<f64> {
    let mut total = 0.0;
    for part in chunk_by_size(insts, 64) {
        let mut g = Graph::new();
        let enc = encode_batch(&mut g, model, part, BnMode::Eval, false)?;
        total += enc.hyperedges.iter().map(|s| s.mean_degree()).sum::<f64>();
    }
    Ok(total / insts.len() as f64)
}

/// One short training run per `(δ, λ)` cell, all from the same seed.
pub fn sweep(args: &SweepArgs, mut on_cell: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    if args.deltas.is_empty() || args.lambdas.is_empty() {
        return Err(Error::Usage("sweep needs at least one delta and one lambda value".into()));
    }
    if args.budget == 0 {
        return Err(Error::Usage("sweep budget must be at least one epoch".into()));
    }
    let mut deltas = args.deltas.clone();
    deltas.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    for &lambda in &args.lambdas {
        for &delta in &deltas {
            let mut cfg = args.base.clone();
            cfg.epochs = args.budget;
            cfg.model.delta = delta;
            cfg.model.lambda = lambda;
            let mut trainer = Trainer::new(cfg)?;
            let val = validation_set(&trainer.config);
            let initial = mean_degree(&trainer.actor, &val)?;
            trainer.run(None, |_| {})?;
            let row = SweepRow {
                delta,
                lambda,
                validation_cost: trainer.log.last().map_or(f64::NAN, |e| e.mean_actor_cost),
                mean_degree: initial,
                trained_mean_degree: mean_degree(&trainer.actor, &val)?,
            };
            on_cell(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn cmd_sweep(args: &SweepArgs, on_cell: impl FnMut(&SweepRow)) -> Result<(Vec<SweepRow>, RunManifest)> {
    let config = serde_json::json!({
        "base": args.base, "deltas": args.deltas, "lambdas": args.lambdas, "budget": args.budget,
    });
    let mut m = RunManifest::start("sweep", config, args.base.seed);
    let rows = sweep(args, on_cell)?;
    let path = args.out.join("sweep.csv");
    write_atomic(&path, sweep_csv(&rows).as_bytes())?;
    add_output(&mut m, &args.out, &path);
    Ok((rows, m.finish(&args.out)?))
}

/// Training log of a finished run, as written next to its checkpoints.
pub fn training_log(trainer: &Trainer) -> String {
    log_csv(&trainer.log)
}
