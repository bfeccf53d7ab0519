//! REINFORCE training with a greedy self-critic baseline. Decoder and
//! attention weights step after every batch; selection and master
//! projections step once per epoch from the accumulated hyperedge loss.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::decoder::{rollout_batch, DecodePolicy};
use crate::encoder::{encode_batch, BnMode};
use crate::error::{Error, Result};
use crate::instances::{generate_with, Instance, MAX_GENERATED_DEMAND};
use crate::io::write_atomic;
use crate::model::{Model, ModelConfig};
use crate::tensor::{read_container, write_container, AdamConfig, AdamState, Container, Gradients, Graph, Group, Tensor, Var};

const CHECKPOINT_KIND: &str = "hvrp-train";
const CHECKPOINT_VERSION: u64 = 1;
const VALIDATION_SALT: u64 = 0x7a1d_a7e5_0f5e_ed00;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Customers per instance.
    pub n: usize,
    pub capacity: u32,
    pub lr: f64,
    /// Per-epoch learning-rate multiplier.
    pub lr_decay: f64,
    /// Significance level of the baseline replacement test.
    pub epsilon: f64,
    pub seed: u64,
    pub val_size: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Single-machine scale: CVRP20, roughly 10,000 instances per epoch.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            steps_per_epoch: 156,
            batch_size: 64,
            n: 20,
            capacity: 30,
            lr: 1e-4,
            lr_decay: 0.96,
            epsilon: 0.05,
            seed: 1234,
            val_size: 128,
            model: ModelConfig {
                hidden_dim: 128,
                heads: 8,
                ..ModelConfig::default()
            },
        }
    }

    /// The published schedule: 200 epochs of 128,000 instances, d = 256.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 200,
            steps_per_epoch: 250,
            batch_size: 512,
            val_size: 1280,
            model: ModelConfig::default(),
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("n", self.n),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.val_size < 2 {
            return Err(Error::InvalidArgument("val_size must be at least 2".into()));
        }
        if self.capacity < MAX_GENERATED_DEMAND {
            return Err(Error::InvalidArgument(format!(
                "capacity {} below the largest generated demand {MAX_GENERATED_DEMAND}",
                self.capacity
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::InvalidArgument("lr and lr_decay must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        self.model.validate()
    }

    /// Learning rate in effect after `epoch` completed epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// The fixed validation set of a configuration.
pub fn validation_set(cfg: &TrainConfig) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_SALT);
    (0..cfg.val_size)
        .map(|i| generate_with(&mut rng, cfg.n, cfg.capacity, format!("val-{i}")))
        .collect()
}

/// `(1/B) Σ (cost_actor − cost_baseline) · logp`, with the advantage held
/// constant. Its gradient is the REINFORCE estimate for cost minimization.
pub fn reinforce_surrogate(g: &mut Graph, logp: Var, cost_actor: &[f64], cost_baseline: &[f64]) -> Result<Var> {
    let b = g.shape(logp).iter().product::<usize>();
    if cost_actor.len() != b || cost_baseline.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{b} log-probabilities, {} actor and {} baseline costs",
            cost_actor.len(),
            cost_baseline.len()
        )));
    }
    let adv: Vec<f64> = cost_actor.iter().zip(cost_baseline).map(|(a, c)| a - c).collect();
    let adv = g.constant(Tensor::new(g.shape(logp).to_vec(), adv)?);
    let weighted = g.mul(logp, adv)?;
    let total = g.sum_all(weighted)?;
    g.scale(total, 1.0 / b as f64)
}

pub fn reinforce_grad(g: &mut Graph, logp: Var, cost_actor: &[f64], cost_baseline: &[f64]) -> Result<Gradients> {
    let s = reinforce_surrogate(g, logp, cost_actor, cost_baseline)?;
    g.backward(s)
}

/// Batch mean of a per-instance loss vector.
pub fn batch_mean(g: &mut Graph, per_instance: Var) -> Result<Var> {
    let b = g.value(per_instance).len();
    let s = g.sum_all(per_instance)?;
    g.scale(s, 1.0 / b as f64)
}

/// Left-tailed paired t-test of `cost_actor − cost_baseline`: small values
/// mean the actor is better.
pub fn paired_ttest_onesided(cost_actor: &[f64], cost_baseline: &[f64]) -> Result<f64> {
    if cost_actor.len() != cost_baseline.len() {
        return Err(Error::InvalidArgument("paired samples differ in length".into()));
    }
    let b = cost_actor.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("t-test needs at least 2 pairs, got {b}")));
    }
    let d: Vec<f64> = cost_actor.iter().zip(cost_baseline).map(|(a, c)| a - c).collect();
    let mean = d.iter().sum::<f64>() / b as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(if mean < 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (sd / (b as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (b - 1) as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(dist.cdf(t))
}

/// Greedy costs of `model` on `insts`, decoded in chunks of `chunk`.
pub fn greedy_costs(model: &Model, insts: &[Instance], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(insts.len());
    for part in chunk_by_size(insts, chunk.max(1)) {
        let mut g = Graph::new();
        let enc = encode_batch(&mut g, model, part, BnMode::Eval, false)?;
        let r = rollout_batch(&mut g, model, &enc, part, DecodePolicy::Greedy, false)?;
        out.extend(r.solutions.iter().map(|s| s.cost));
    }
    Ok(out)
}

/// Consecutive runs of at most `size` instances sharing a customer count.
pub fn chunk_by_size(insts: &[Instance], size: usize) -> Vec<&[Instance]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < insts.len() {
        let n = insts[start].n();
        let mut end = start + 1;
        while end < insts.len() && end - start < size && insts[end].n() == n {
            end += 1;
        }
        out.push(&insts[start..end]);
        start = end;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Greedy validation cost of the actor after the epoch's updates.
    pub mean_actor_cost: f64,
    /// Greedy validation cost of the baseline it was tested against.
    pub mean_baseline_cost: f64,
    pub l_node: f64,
    pub l_rec: f64,
    pub l_con: f64,
    pub l_hg: f64,
    pub ttest_p: f64,
    pub baseline_swapped: bool,
    pub wallclock_s: f64,
    /// Mean sampled training cost over the epoch.
    pub train_cost: f64,
    /// Mean hyperedge degree over the epoch's training batches.
    pub mean_degree: f64,
}

pub const LOG_HEADER: &str =
    "epoch,lr,mean_actor_cost,mean_baseline_cost,L_node,L_rec,L_con,L_hg,ttest_p,baseline_swapped,wallclock_s";

pub fn log_csv(log: &[EpochStats]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{:.3}\n",
            e.epoch,
            e.lr,
            e.mean_actor_cost,
            e.mean_baseline_cost,
            e.l_node,
            e.l_rec,
            e.l_con,
            e.l_hg,
            e.ttest_p,
            e.baseline_swapped,
            e.wallclock_s
        ));
    }
    s
}

/// Per-batch quantities reported to a step observer.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub actor_cost: f64,
    pub baseline_cost: f64,
    pub l_hg: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub actor: Model,
    pub baseline: Model,
    pub opt_rl: AdamState,
    pub opt_hg: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochStats>,
    pub best_cost: Option<f64>,
    rng: ChaCha8Rng,
    validation: Vec<Instance>,
}

fn rl_names(model: &Model) -> Vec<String> {
    model.params.names_in(Group::Rl)
}

impl Trainer {
    /// Xavier-initialized actor with the baseline as its copy.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let actor = Model::new(config.model.clone(), config.seed)?;
        let baseline = actor.clone();
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        Ok(Trainer {
            validation: validation_set(&config),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            opt_rl: AdamState::new(adam),
            opt_hg: AdamState::new(adam),
            actor,
            baseline,
            epoch: 0,
            log: Vec::new(),
            best_cost: None,
            config,
        })
    }

    pub fn validation(&self) -> &[Instance] {
        &self.validation
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn training_batch(&mut self) -> Vec<Instance> {
        let (n, q) = (self.config.n, self.config.capacity);
        (0..self.config.batch_size)
            .map(|i| generate_with(&mut self.rng, n, q, format!("train-{i}")))
            .collect()
    }

    /// One batch: accumulates the hyperedge-loss gradient into `hg_acc`
    /// (scaled by `weight`) and takes an Adam step on the RL group.
    fn train_step(&mut self, step: usize, hg_acc: &mut Gradients, weight: f64, sums: &mut [f64; 6]) -> Result<StepReport> {
        let insts = self.training_batch();
        let b = insts.len();
        let mut g = Graph::new();
        let enc = encode_batch(&mut g, &self.actor, &insts, BnMode::Train, true)?;
        if let Some(stats) = &enc.batch_stats {
            let rows = b * (self.config.n + 1);
            let momentum = self.actor.config.bn_momentum;
            self.actor.bn.update(&stats.mean, &stats.var, rows, momentum);
        }
        let losses = enc.losses.expect("losses requested");
        let l_hg = batch_mean(&mut g, losses.hg)?;
        if self.actor.config.uses_hypergraph() {
            let mut grads = g.backward(l_hg)?;
            grads.retain(|n| self.actor.params.group(n) == Some(Group::Hg));
            hg_acc.add_scaled(&grads, weight);
        }
        let mean = |g: &Graph, v: Var| g.value(v).data().iter().sum::<f64>() / b as f64;
        sums[0] += mean(&g, losses.node);
        sums[1] += mean(&g, losses.rec);
        sums[2] += mean(&g, losses.con);
        sums[3] += mean(&g, losses.hg);
        sums[5] += enc.hyperedges.iter().map(|s| s.mean_degree()).sum::<f64>() / b as f64;

        let sampled = rollout_batch(&mut g, &self.actor, &enc, &insts, DecodePolicy::Sample(&mut self.rng), false)?;
        let actor_costs: Vec<f64> = sampled.solutions.iter().map(|s| s.cost).collect();
        let baseline_costs = greedy_costs(&self.baseline, &insts, b)?;
        let mut grads = reinforce_grad(&mut g, sampled.log_prob, &actor_costs, &baseline_costs)?;
        let rl = rl_names(&self.actor);
        grads.retain(|n| rl.iter().any(|r| r == n));
        self.opt_rl.step(&mut self.actor.params, &grads)?;
        let actor_cost = actor_costs.iter().sum::<f64>() / b as f64;
        sums[4] += actor_cost;
        Ok(StepReport {
            step,
            actor_cost,
            baseline_cost: baseline_costs.iter().sum::<f64>() / b as f64,
            l_hg: g.value(l_hg).item(),
        })
    }

    /// Runs one epoch; `observer` sees the actor after every batch.
    pub fn train_epoch(&mut self, mut observer: Option<&mut dyn FnMut(&StepReport, &Model)>) -> Result<EpochStats> {
        let start = Instant::now();
        let lr = self.config.lr_at(self.epoch);
        self.opt_rl.set_lr(lr);
        self.opt_hg.set_lr(lr);
        let t = self.config.steps_per_epoch;
        let mut hg_acc = Gradients::default();
        let mut sums = [0.0; 6];
        for step in 0..t {
            let report = self.train_step(step, &mut hg_acc, 1.0 / t as f64, &mut sums)?;
            if let Some(obs) = observer.as_mut() {
                obs(&report, &self.actor);
            }
        }
        if !hg_acc.is_empty() {
            self.opt_hg.step(&mut self.actor.params, &hg_acc)?;
        }
        self.epoch += 1;
        let next_lr = self.config.lr_at(self.epoch);
        self.opt_rl.set_lr(next_lr);
        self.opt_hg.set_lr(next_lr);

        let chunk = self.config.batch_size;
        let actor_val = greedy_costs(&self.actor, &self.validation, chunk)?;
        let baseline_val = greedy_costs(&self.baseline, &self.validation, chunk)?;
        let p = paired_ttest_onesided(&actor_val, &baseline_val)?;
        let swapped = p < self.config.epsilon;
        if swapped {
            self.baseline = self.actor.clone();
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let tf = t as f64;
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            mean_actor_cost: avg(&actor_val),
            mean_baseline_cost: avg(&baseline_val),
            l_node: sums[0] / tf,
            l_rec: sums[1] / tf,
            l_con: sums[2] / tf,
            l_hg: sums[3] / tf,
            ttest_p: p,
            baseline_swapped: swapped,
            wallclock_s: start.elapsed().as_secs_f64(),
            train_cost: sums[4] / tf,
            mean_degree: sums[5] / tf,
        };
        self.log.push(stats.clone());
        Ok(stats)
    }

    /// Runs the remaining epochs. With `out_dir`, writes `epoch-XXX.ckpt`,
    /// `best.ckpt` and `train_log.csv` after every epoch.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_epoch: impl FnMut(&EpochStats)) -> Result<()> {
        while !self.is_finished() {
            let stats = self.train_epoch(None)?;
            let improved = self.best_cost.is_none_or(|b| stats.mean_actor_cost < b);
            if improved {
                self.best_cost = Some(stats.mean_actor_cost);
            }
            if let Some(dir) = out_dir {
                let bytes = write_container(&self.checkpoint());
                write_atomic(&dir.join(format!("epoch-{:03}.ckpt", self.epoch)), &bytes)?;
                if improved {
                    write_atomic(&dir.join("best.ckpt"), &bytes)?;
                }
                write_atomic(&dir.join("train_log.csv"), log_csv(&self.log).as_bytes())?;
            }
            on_epoch(&stats);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Container {
        let mut c = Container::default();
        self.actor.write_into(&mut c, "actor.");
        self.baseline.write_into(&mut c, "baseline.");
        for (prefix, opt) in [("opt_rl", &self.opt_rl), ("opt_hg", &self.opt_hg)] {
            for name in opt.moment_names() {
                let (m, v) = opt.moments(&name).expect("listed moment");
                c.push(format!("{prefix}.m.{name}"), "adam", m.clone());
                c.push(format!("{prefix}.v.{name}"), "adam", v.clone());
            }
        }
        c.meta = json!({
            "kind": CHECKPOINT_KIND,
            "version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "config": self.config,
            "rng": {
                "seed": self.rng.get_seed().to_vec(),
                "stream": self.rng.get_stream().to_string(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "best_cost": self.best_cost,
            "opt_rl": { "config": self.opt_rl.config, "step": self.opt_rl.step },
            "opt_hg": { "config": self.opt_hg.config, "step": self.opt_hg.step },
            "log": self.log,
        });
        c
    }

    pub fn from_checkpoint(c: &Container) -> Result<Self> {
        let meta = &c.meta;
        let bad = |what: &str| Error::Version(format!("checkpoint {what}"));
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(bad("is not a training checkpoint"));
        }
        let version = meta.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION) {
            return Err(Error::Version(format!(
                "checkpoint version {version:?}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let field = |name: &str| meta.get(name).cloned().ok_or_else(|| bad(&format!("lacks `{name}`")));
        let parse = |v: serde_json::Value, what: &str| -> Result<serde_json::Value> {
            if v.is_null() {
                Err(bad(&format!("has null `{what}`")))
            } else {
                Ok(v)
            }
        };
        let config: TrainConfig =
            serde_json::from_value(field("config")?).map_err(|e| bad(&format!("config: {e}")))?;
        config.validate()?;
        let epoch = parse(field("epoch")?, "epoch")?.as_u64().ok_or_else(|| bad("epoch"))? as usize;
        let rng_meta = field("rng")?;
        let seed: Vec<u8> =
            serde_json::from_value(rng_meta["seed"].clone()).map_err(|e| bad(&format!("rng seed: {e}")))?;
        let seed: [u8; 32] = seed.try_into().map_err(|_| bad("rng seed length"))?;
        let num = |key: &str| -> Result<u128> {
            rng_meta[key]
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(&format!("rng {key}")))
        };
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(num("stream")? as u64);
        rng.set_word_pos(num("word_pos")?);
        let best_cost: Option<f64> = serde_json::from_value(field("best_cost")?).map_err(|e| bad(&e.to_string()))?;
        let log: Vec<EpochStats> = serde_json::from_value(field("log")?).map_err(|e| bad(&format!("log: {e}")))?;
        let actor = Model::read_from(c, "actor.", config.model.clone())?;
        let baseline = Model::read_from(c, "baseline.", config.model.clone())?;
        let mut opts = Vec::new();
        for prefix in ["opt_rl", "opt_hg"] {
            let m = field(prefix)?;
            let cfg: AdamConfig =
                serde_json::from_value(m["config"].clone()).map_err(|e| bad(&format!("{prefix}: {e}")))?;
            let mut opt = AdamState::new(cfg);
            opt.step = m["step"].as_u64().ok_or_else(|| bad(&format!("{prefix} step")))?;
            let first_prefix = format!("{prefix}.m.");
            for (name, _, first) in c.with_prefix(&first_prefix) {
                let second = c
                    .get(&format!("{prefix}.v.{name}"))
                    .ok_or_else(|| bad(&format!("lacks second moment of `{name}`")))?;
                opt.insert_moments(name.to_string(), first.clone(), second.clone());
            }
            opts.push(opt);
        }
        let opt_hg = opts.pop().expect("two optimizers");
        let opt_rl = opts.pop().expect("two optimizers");
        Ok(Trainer {
            validation: validation_set(&config),
            rng,
            opt_rl,
            opt_hg,
            actor,
            baseline,
            epoch,
            log,
            best_cost,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &write_container(&self.checkpoint()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        Self::from_checkpoint(&read_container(&bytes)?)
    }
}

/// Trains from scratch per `cfg`.
pub fn train(cfg: TrainConfig, out_dir: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(cfg)?;
    t.run(out_dir, |_| {})?;
    Ok(t)
}
