//! Model configuration, parameter layout and (de)serialization of a full
//! policy (parameters plus batch-norm running statistics).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::FeatureMode;
use crate::tensor::{xavier_init, Container, Group, ParameterStore, Tensor};

/// Hyperedge construction rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    /// Soft: members are kept, overflow beyond capacity is penalized.
    Capacity,
    /// Hard: candidates farther than `r_prox` from the master are dropped.
    Proximity,
}

impl Constraint {
    pub fn parse(s: &str) -> Result<Constraint> {
        match s.trim() {
            "capacity" => Ok(Constraint::Capacity),
            "proximity" => Ok(Constraint::Proximity),
            other => Err(Error::InvalidArgument(format!("unknown constraint `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Constraint::Capacity => "capacity",
            Constraint::Proximity => "proximity",
        }
    }
}

/// Model variants used for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoHypergraph,
    NoAugmentation,
    NoDualPointer,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Ablation> {
        match s.trim() {
            "" | "none" => Ok(Ablation::None),
            "no-hypergraph" => Ok(Ablation::NoHypergraph),
            "no-augmentation" => Ok(Ablation::NoAugmentation),
            "no-dual-pointer" => Ok(Ablation::NoDualPointer),
            other => Err(Error::Usage(format!(
                "unknown ablation `{other}` (expected none, no-hypergraph, no-augmentation or no-dual-pointer)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoHypergraph => "no-hypergraph",
            Ablation::NoAugmentation => "no-augmentation",
            Ablation::NoDualPointer => "no-dual-pointer",
        }
    }
}

/// Starting weight of the fused hyperedge term when `fusion_skip` is set.
pub const FUSION_GATE_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    pub gat_layers: usize,
    pub hg_layers: usize,
    /// Selection threshold.
    pub delta: f64,
    /// Weight of the L2 coefficient term in the reconstruction loss.
    pub lambda: f64,
    /// Weight of the constraint loss.
    pub gamma: f64,
    pub constraints: Vec<Constraint>,
    pub r_prox: f64,
    pub clip: f64,
    pub ablation: Ablation,
    /// Node update `x + a·fused` with a learned scalar `a` instead of the
    /// bare fused output.
    pub fusion_skip: bool,
    /// Stop reward gradients at the hyperedge coefficients used for fusion;
    /// the hypergraph losses still see live coefficients.
    pub detach_coefficients: bool,
    /// Whether depot visits enter the running sum of visited embeddings.
    pub hist_includes_depot: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 256,
            heads: 8,
            gat_layers: 1,
            hg_layers: 1,
            delta: 0.0,
            lambda: 0.2,
            gamma: 1.0,
            constraints: vec![Constraint::Capacity],
            r_prox: 0.35,
            clip: 10.0,
            ablation: Ablation::None,
            fusion_skip: true,
            detach_coefficients: false,
            hist_includes_depot: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.gat_layers == 0 || self.hg_layers == 0 {
            return bad("layer counts must be at least 1".into());
        }
        if self.constraints.is_empty() {
            return bad("at least one constraint is required".into());
        }
        if self.lambda < 0.0 || self.gamma < 0.0 || self.r_prox < 0.0 || self.clip <= 0.0 {
            return bad("lambda, gamma and r_prox must be non-negative, clip positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("bn_momentum must lie in [0, 1] and bn_eps be positive".into());
        }
        Ok(())
    }

    pub fn features(&self) -> FeatureMode {
        if self.ablation == Ablation::NoAugmentation {
            FeatureMode::Raw
        } else {
            FeatureMode::Augmented
        }
    }

    pub fn uses_hypergraph(&self) -> bool {
        self.ablation != Ablation::NoHypergraph
    }

    pub fn dual_pointer(&self) -> bool {
        self.ablation != Ablation::NoDualPointer
    }

    /// Every `(name, shape, group)` of the model, in a fixed order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>, Group)> {
        let d = self.hidden_dim;
        let f = self.features();
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, group: Group| out.push((name, shape, group));
        push("enc.depot.w".into(), vec![f.depot_width(), d], Group::Rl);
        push("enc.depot.b".into(), vec![d], Group::Rl);
        push("enc.cust.w".into(), vec![f.customer_width(), d], Group::Rl);
        push("enc.cust.b".into(), vec![d], Group::Rl);
        push("enc.bn.gamma".into(), vec![d], Group::Rl);
        push("enc.bn.beta".into(), vec![d], Group::Rl);
        let extra_gat = if self.uses_hypergraph() { 0 } else { self.hg_layers };
        for l in 0..self.gat_layers + extra_gat {
            push(format!("enc.gat{l}.w"), vec![d, d], Group::Rl);
            push(format!("enc.gat{l}.a_src"), vec![d], Group::Rl);
            push(format!("enc.gat{l}.a_dst"), vec![d], Group::Rl);
        }
        if self.uses_hypergraph() {
            for l in 0..self.hg_layers {
                push(format!("enc.hg{l}.sel"), vec![d, d], Group::Hg);
                push(format!("enc.hg{l}.proj"), vec![d, d], Group::Hg);
                for m in ["q", "k", "v"] {
                    push(format!("enc.hg{l}.{m}"), vec![d, d], Group::Rl);
                }
                if self.fusion_skip {
                    push(format!("enc.hg{l}.gate"), vec![1, 1], Group::Rl);
                }
            }
        }
        let pointers: &[&str] = if self.dual_pointer() { &["cur", "hist"] } else { &["cur"] };
        for p in pointers {
            push(format!("dec.{p}.ctx.w"), vec![2 * d + 1, d], Group::Rl);
            push(format!("dec.{p}.ctx.b"), vec![d], Group::Rl);
            push(format!("dec.{p}.q"), vec![d, d], Group::Rl);
            push(format!("dec.{p}.k"), vec![d, d], Group::Rl);
        }
        out
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Running batch-norm statistics used in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        RunningStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// Exponential update from one training batch of `rows` samples whose
    /// biased variance is `var`; the running variance stores the unbiased
    /// estimate.
    pub fn update(&mut self, mean: &[f64], var: &[f64], rows: usize, momentum: f64) {
        let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
        for j in 0..self.mean.len() {
            self.mean[j] = (1.0 - momentum) * self.mean[j] + momentum * mean[j];
            self.var[j] = (1.0 - momentum) * self.var[j] + momentum * var[j] * unbias;
        }
    }
}

/// A complete policy: configuration, trainable parameters and batch-norm
/// buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub bn: RunningStats,
}

impl Model {
    /// Xavier-initialized weights (each tensor seeded from `seed` and its
    /// name), zero biases, unit batch-norm scale.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        for (name, shape, group) in config.parameter_layout() {
            let value = if name.ends_with(".b") || name.ends_with("bn.beta") {
                Tensor::zeros(&shape)
            } else if name.ends_with("bn.gamma") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".gate") {
                Tensor::full(&shape, FUSION_GATE_INIT)
            } else {
                xavier_init(&shape, seed ^ fnv1a(&name))?
            };
            params.insert(name, group, value)?;
        }
        let bn = RunningStats::new(config.hidden_dim);
        Ok(Model { config, params, bn })
    }

    /// Appends parameters and buffers to `c` under `prefix`.
    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        for (name, group, t) in self.params.iter() {
            c.push(format!("{prefix}{name}"), group.as_str(), t.clone());
        }
        c.push(format!("{prefix}enc.bn.running_mean"), "buffer", Tensor::vector(self.bn.mean.clone()));
        c.push(format!("{prefix}enc.bn.running_var"), "buffer", Tensor::vector(self.bn.var.clone()));
    }

    /// Rebuilds a model stored with [`Model::write_into`]; every expected
    /// tensor must be present with its exact shape.
    pub fn read_from(c: &Container, prefix: &str, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let key = format!("{prefix}{name}");
            let t = c
                .get(&key)
                .ok_or_else(|| Error::Version(format!("checkpoint lacks `{key}`")))?;
            if t.shape() != shape {
                return Err(Error::Version(format!(
                    "`{key}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t.clone())
        };
        for (name, shape, group) in config.parameter_layout() {
            let t = fetch(&name, &shape)?;
            params.insert(name, group, t)?;
        }
        let d = config.hidden_dim;
        let bn = RunningStats {
            mean: fetch("enc.bn.running_mean", &[d])?.into_data(),
            var: fetch("enc.bn.running_var", &[d])?.into_data(),
        };
        Ok(Model { config, params, bn })
    }
}
