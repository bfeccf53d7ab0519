//! Central finite-difference checks of recorded gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{rollout_batch, DecodePolicy};
use crate::encoder::{encode_batch, encode_batch_with_scores, BnMode};
use crate::error::{Error, Result};
use crate::instances::Instance;
use crate::model::Model;
use crate::tensor::{Gradients, Graph, ParameterStore, Tensor};
use crate::trainer::{batch_mean, reinforce_surrogate};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares `analytic` with central differences of step `h` of `f` over
/// every entry of every parameter named in `analytic`.
pub fn check_store(
    store: &ParameterStore,
    analytic: &Gradients,
    h: f64,
    floor: f64,
    mut f: impl FnMut(&ParameterStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let names: Vec<String> = analytic.names().cloned().collect();
    for name in names {
        let grad = analytic.get(&name).expect("listed name").clone();
        let len = work
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?
            .len();
        for i in 0..len {
            let orig = work.get(&name).expect("present").data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = orig + h;
            let up = f(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig - h;
            let down = f(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn with_params(model: &Model, store: &ParameterStore) -> Model {
    Model {
        config: model.config.clone(),
        params: store.clone(),
        bn: model.bn.clone(),
    }
}

/// Batch-mean hyperedge loss in training mode, with its gradient.
pub fn hypergraph_loss(model: &Model, insts: &[Instance]) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let enc = encode_batch(&mut g, model, insts, BnMode::Train, true)?;
    let losses = enc.losses.ok_or_else(|| Error::InvalidArgument("no losses recorded".into()))?;
    let l = batch_mean(&mut g, losses.hg)?;
    Ok((g.value(l).item(), g.backward(l)?))
}

/// Checks the hyperedge loss with respect to every model parameter.
pub fn check_hypergraph_loss(model: &Model, insts: &[Instance], h: f64, floor: f64) -> Result<GradCheckReport> {
    let (_, analytic) = hypergraph_loss(model, insts)?;
    check_store(&model.params, &analytic, h, floor, |store| {
        Ok(hypergraph_loss(&with_params(model, store), insts)?.0)
    })
}

/// A REINFORCE surrogate with fixed actions, advantages and hyperedge
/// structure, so that it is a smooth function of the parameters.
pub struct SurrogateProblem {
    pub actions: Vec<Vec<usize>>,
    pub cost_actor: Vec<f64>,
    pub cost_baseline: Vec<f64>,
    pub scores: Vec<Tensor>,
}

impl SurrogateProblem {
    /// Samples actions from `model` and takes greedy costs of the same
    /// model as the baseline.
    pub fn sample(model: &Model, insts: &[Instance], seed: u64) -> Result<Self> {
        let mut g = Graph::new();
        let enc = encode_batch(&mut g, model, insts, BnMode::Train, false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampled = rollout_batch(&mut g, model, &enc, insts, DecodePolicy::Sample(&mut rng), false)?;
        let greedy = rollout_batch(&mut g, model, &enc, insts, DecodePolicy::Greedy, false)?;
        Ok(SurrogateProblem {
            actions: sampled.solutions.iter().map(|s| s.visits[1..].to_vec()).collect(),
            cost_actor: sampled.solutions.iter().map(|s| s.cost).collect(),
            cost_baseline: greedy.solutions.iter().map(|s| s.cost).collect(),
            scores: enc.scores,
        })
    }

    pub fn evaluate(&self, model: &Model, insts: &[Instance]) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let enc = encode_batch_with_scores(&mut g, model, insts, BnMode::Train, false, &self.scores)?;
        let r = rollout_batch(&mut g, model, &enc, insts, DecodePolicy::Forced(&self.actions), false)?;
        let s = reinforce_surrogate(&mut g, r.log_prob, &self.cost_actor, &self.cost_baseline)?;
        Ok((g.value(s).item(), g.backward(s)?))
    }
}

/// Checks the surrogate with respect to every model parameter on its path.
pub fn check_reinforce_surrogate(model: &Model, insts: &[Instance], seed: u64, h: f64, floor: f64) -> Result<GradCheckReport> {
    let problem = SurrogateProblem::sample(model, insts, seed)?;
    let (_, analytic) = problem.evaluate(model, insts)?;
    check_store(&model.params, &analytic, h, floor, |store| {
        Ok(problem.evaluate(&with_params(model, store), insts)?.0)
    })
}
