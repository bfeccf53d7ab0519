//! Autoregressive tour construction with a current-node pointer and a
//! historical pointer over the visited route.
//!
//! [`rollout_batch`] decodes a batch on a [`Graph`] so the summed
//! log-probabilities can be differentiated. The free functions below it
//! evaluate single decoding pieces on plain values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{BatchEncoding, EncodedGraph};
use crate::error::{Error, Result};
use crate::instances::Instance;
use crate::model::Model;
use crate::routes::Solution;
use crate::tensor::{Graph, Tensor, Var};

/// Decoding state of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    /// Indexed by node; entry 0 (the depot) stays false.
    pub visited: Vec<bool>,
    pub current: usize,
    /// Remaining load in demand units.
    pub remaining: u32,
    pub capacity: u32,
    /// Partial visit sequence, starting at the depot.
    pub visits: Vec<usize>,
    /// Sum of the embeddings of every chosen node so far.
    pub hist_sum: Vec<f64>,
    pub t: usize,
    /// Whether depot returns are added to `hist_sum`.
    pub hist_includes_depot: bool,
}

impl DecodeState {
    pub fn new(inst: &Instance, hidden_dim: usize, hist_includes_depot: bool) -> Self {
        DecodeState {
            visited: vec![false; inst.num_nodes()],
            current: 0,
            remaining: inst.capacity,
            capacity: inst.capacity,
            visits: vec![0],
            hist_sum: vec![0.0; hidden_dim],
            t: 0,
            hist_includes_depot,
        }
    }

    /// Remaining capacity as a fraction of `Q`.
    pub fn remaining_fraction(&self) -> f64 {
        self.remaining as f64 / self.capacity as f64
    }

    pub fn unvisited(&self) -> usize {
        self.visited.iter().skip(1).filter(|v| !**v).count()
    }

    /// Every customer served and the vehicle back at the depot.
    pub fn is_done(&self) -> bool {
        self.t > 0 && self.current == 0 && self.unvisited() == 0
    }
}

/// `true` marks a node that may be chosen next.
pub fn feasible_mask(state: &DecodeState, inst: &Instance) -> Vec<bool> {
    let mut mask = vec![false; inst.num_nodes()];
    for (v, m) in mask.iter_mut().enumerate().skip(1) {
        *m = !state.visited[v] && inst.demand(v) <= state.remaining;
    }
    let any_customer = mask.iter().any(|&m| m);
    let depot_blocked = state.t == 0 || (state.current == 0 && state.unvisited() > 0);
    mask[0] = !any_customer || !depot_blocked;
    mask
}

/// Applies `chosen` to `state`; `h` holds the node embeddings `(N, d)`.
pub fn step(state: &mut DecodeState, chosen: usize, inst: &Instance, h: &Tensor) -> Result<()> {
    let mask = feasible_mask(state, inst);
    if chosen >= mask.len() || !mask[chosen] {
        return Err(Error::ContractViolation(format!(
            "node {chosen} is not feasible at step {}",
            state.t
        )));
    }
    if chosen == 0 {
        state.remaining = state.capacity;
    } else {
        state.visited[chosen] = true;
        state.remaining -= inst.demand(chosen);
    }
    if chosen != 0 || state.hist_includes_depot {
        for (s, x) in state.hist_sum.iter_mut().zip(h.row(chosen)) {
            *s += x;
        }
    }
    state.visits.push(chosen);
    state.current = chosen;
    state.t += 1;
    Ok(())
}

/// How the next node is picked from the fused distribution.
pub enum DecodePolicy<'a> {
    /// Highest probability, lowest index on ties.
    Greedy,
    /// Inverse-CDF sampling.
    Sample(&'a mut ChaCha8Rng),
    /// Replays the given choices (every entry after the initial depot).
    /// Once an instance's list runs out, the depot is chosen.
    Forced(&'a [Vec<usize>]),
}

/// One decoding step of a batch.
#[derive(Clone, Debug)]
pub struct StepTrace {
    /// Fused probabilities `(B, N)`.
    pub probs: Tensor,
    /// Fused logits `(B, N)`; masked entries are `-inf`.
    pub logits: Tensor,
    pub masks: Vec<Vec<bool>>,
    /// Remaining capacity fraction before the step.
    pub remaining: Vec<f64>,
    pub chosen: Vec<usize>,
}

pub struct Rollout {
    pub solutions: Vec<Solution>,
    /// Summed log-probability of every instance's choices, `(B,)`.
    pub log_prob: Var,
    pub trace: Option<Vec<StepTrace>>,
}

struct Pointer {
    ctx_w: Var,
    ctx_b: Var,
    q: Var,
    keys: Var,
}

fn pointer(g: &mut Graph, model: &Model, name: &str, h: Var) -> Result<Pointer> {
    let store = &model.params;
    let k = g.param(store, &format!("dec.{name}.k"))?;
    Ok(Pointer {
        ctx_w: g.param(store, &format!("dec.{name}.ctx.w"))?,
        ctx_b: g.param(store, &format!("dec.{name}.ctx.b"))?,
        q: g.param(store, &format!("dec.{name}.q"))?,
        keys: g.matmul(h, k)?,
    })
}

/// Clipped compatibilities `clip·tanh(u)` of one pointer, `(B, N)`.
fn clipped_scores(g: &mut Graph, p: &Pointer, graph_emb: Var, slot: Var, load: Var, clip: f64) -> Result<Var> {
    let x = g.concat(&[graph_emb, slot, load], 1)?;
    let ctx = g.matmul(x, p.ctx_w)?;
    let ctx = g.add_bias(ctx, p.ctx_b)?;
    let query = g.matmul(ctx, p.q)?;
    let (b, d) = (g.shape(query)[0], g.shape(query)[1]);
    let query = g.reshape(query, &[b, 1, d])?;
    let u = g.bmm(p.keys, query, true)?;
    let n = g.shape(u)[1];
    let u = g.reshape(u, &[b, n])?;
    let u = g.scale(u, 1.0 / (d as f64).sqrt())?;
    let u = g.tanh(u)?;
    g.scale(u, clip)
}

fn pick(policy: &mut DecodePolicy<'_>, probs: &[f64], mask: &[bool], k: usize, t: usize) -> usize {
    match policy {
        DecodePolicy::Greedy => {
            let mut best = None;
            for (v, &p) in probs.iter().enumerate() {
                if mask[v] && best.is_none_or(|(_, bp)| p > bp) {
                    best = Some((v, p));
                }
            }
            best.map_or(0, |(v, _)| v)
        }
        DecodePolicy::Sample(rng) => {
            let r: f64 = rng.random();
            let mut acc = 0.0;
            let mut last = 0;
            for (v, &p) in probs.iter().enumerate() {
                if !mask[v] {
                    continue;
                }
                acc += p;
                last = v;
                if r < acc {
                    return v;
                }
            }
            last
        }
        DecodePolicy::Forced(actions) => actions[k].get(t).copied().unwrap_or(0),
    }
}

/// Decodes every instance of `insts` from node embeddings `h (B, N, d)` and
/// graph embeddings `graph_emb (B, d)`.
pub fn rollout_from(
    g: &mut Graph,
    model: &Model,
    h: Var,
    graph_emb: Var,
    insts: &[Instance],
    mut policy: DecodePolicy<'_>,
    record_trace: bool,
) -> Result<Rollout> {
    let cfg = &model.config;
    let shape = g.shape(h).to_vec();
    if shape.len() != 3 || shape[0] != insts.len() {
        return Err(Error::shape("rollout", format!("embeddings {shape:?} for {} instances", insts.len())));
    }
    let (b, n_nodes, d) = (shape[0], shape[1], shape[2]);
    if let Some(bad) = insts.iter().find(|i| i.num_nodes() != n_nodes) {
        return Err(Error::shape("rollout", format!("instance `{}` has {} nodes, expected {n_nodes}", bad.name, bad.num_nodes())));
    }
    if let DecodePolicy::Forced(actions) = &policy {
        if actions.len() != b {
            return Err(Error::InvalidArgument(format!("{} forced sequences for {b} instances", actions.len())));
        }
    }
    let cur = pointer(g, model, "cur", h)?;
    let hist = if cfg.dual_pointer() { Some(pointer(g, model, "hist", h)?) } else { None };
    let h_plain = g.value(h).clone();
    let rows: Vec<Tensor> = (0..b)
        .map(|k| Tensor::new(vec![n_nodes, d], h_plain.data()[k * n_nodes * d..(k + 1) * n_nodes * d].to_vec()))
        .collect::<Result<_>>()?;
    let mut states: Vec<DecodeState> = insts.iter().map(|i| DecodeState::new(i, d, cfg.hist_includes_depot)).collect();
    let depot_rows = vec![0usize; b];
    let first = g.gather_rows(h, &depot_rows)?;
    let mut prev = first;
    let mut hist_sum: Option<Var> = None;
    let mut log_prob = g.constant(Tensor::zeros(&[b]));
    let mut trace = record_trace.then(Vec::new);
    let limit = 2 * (n_nodes - 1) + 1;
    for t in 0.. {
        if states.iter().all(DecodeState::is_done) {
            break;
        }
        if t >= limit {
            return Err(Error::ContractViolation(format!("decoding did not finish in {limit} steps")));
        }
        let masks: Vec<Vec<bool>> = states
            .iter()
            .zip(insts)
            .map(|(s, i)| {
                if s.is_done() {
                    let mut m = vec![false; n_nodes];
                    m[0] = true;
                    m
                } else {
                    feasible_mask(s, i)
                }
            })
            .collect();
        let remaining: Vec<f64> = states.iter().map(DecodeState::remaining_fraction).collect();
        let load = g.constant(Tensor::new(vec![b, 1], remaining.clone())?);
        let mut logits = clipped_scores(g, &cur, graph_emb, prev, load, cfg.clip)?;
        if let Some(hp) = &hist {
            let slot = hist_sum.unwrap_or(first);
            let s = clipped_scores(g, hp, graph_emb, slot, load, cfg.clip)?;
            logits = g.add(logits, s)?;
        }
        let flat: Vec<bool> = masks.concat();
        let logp = g.masked_log_softmax(logits, Some(&flat))?;
        let lp = g.value(logp).clone();
        let probs: Vec<f64> = lp.data().iter().map(|v| v.exp()).collect();
        let chosen: Vec<usize> = (0..b)
            .map(|k| {
                if states[k].is_done() {
                    0
                } else {
                    pick(&mut policy, &probs[k * n_nodes..(k + 1) * n_nodes], &masks[k], k, t)
                }
            })
            .collect();
        for k in 0..b {
            if !states[k].is_done() {
                step(&mut states[k], chosen[k], &insts[k], &rows[k])?;
            }
        }
        if let Some(tr) = trace.as_mut() {
            let fused: Vec<f64> = g
                .value(logits)
                .data()
                .iter()
                .zip(&flat)
                .map(|(&v, &ok)| if ok { v } else { f64::NEG_INFINITY })
                .collect();
            tr.push(StepTrace {
                probs: Tensor::new(vec![b, n_nodes], probs)?,
                logits: Tensor::new(vec![b, n_nodes], fused)?,
                masks,
                remaining,
                chosen: chosen.clone(),
            });
        }
        let lp3 = g.reshape(logp, &[b, n_nodes, 1])?;
        let picked = g.gather_rows(lp3, &chosen)?;
        let picked = g.reshape(picked, &[b])?;
        log_prob = g.add(log_prob, picked)?;
        let next = g.gather_rows(h, &chosen)?;
        let added = if cfg.hist_includes_depot {
            next
        } else {
            let keep: Vec<f64> = chosen.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 }).collect();
            let keep = g.constant(Tensor::vector(keep));
            g.scale_rows(next, keep)?
        };
        hist_sum = Some(match hist_sum {
            Some(s) => g.add(s, added)?,
            None => added,
        });
        prev = next;
    }
    let solutions = states
        .into_iter()
        .zip(insts)
        .map(|(s, i)| Solution::from_visits(s.visits, i))
        .collect::<Result<_>>()?;
    Ok(Rollout {
        solutions,
        log_prob,
        trace,
    })
}

/// Decodes from a batch encoding recorded on the same graph.
pub fn rollout_batch(
    g: &mut Graph,
    model: &Model,
    enc: &BatchEncoding,
    insts: &[Instance],
    policy: DecodePolicy<'_>,
    record_trace: bool,
) -> Result<Rollout> {
    rollout_from(g, model, enc.h, enc.graph, insts, policy, record_trace)
}

/// Decodes one instance from plain encoder outputs. Returns the solution
/// and the summed log-probability of its choices.
pub fn rollout(enc: &EncodedGraph, inst: &Instance, model: &Model, policy: DecodePolicy<'_>) -> Result<(Solution, f64)> {
    let mut g = Graph::new();
    let mut hs = enc.h.shape().to_vec();
    hs.insert(0, 1);
    let h = g.constant(enc.h.clone().reshaped(hs)?);
    let emb = g.constant(enc.graph.clone().reshaped(vec![1, enc.graph.len()])?);
    let mut r = rollout_from(&mut g, model, h, emb, std::slice::from_ref(inst), policy, false)?;
    Ok((r.solutions.remove(0), g.value(r.log_prob).data()[0]))
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    let mut out = b.data().to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(&w.data()[i * cols..(i + 1) * cols]) {
            *o += xi * wv;
        }
    }
    out
}

fn param<'a>(model: &'a Model, name: &str) -> Result<&'a Tensor> {
    model
        .params
        .get(name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
}

/// Context vectors `(current, historical)` for `state`. The historical one
/// is `None` when the model has a single pointer.
pub fn context_embeddings(state: &DecodeState, graph_emb: &[f64], h: &Tensor, model: &Model) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let o = state.remaining_fraction();
    let input = |slot: &[f64]| {
        let mut x = graph_emb.to_vec();
        x.extend_from_slice(slot);
        x.push(o);
        x
    };
    let prev = h.row(state.current);
    let hist_slot = if state.t == 0 { prev } else { &state.hist_sum[..] };
    let ctx = |name: &str, slot: &[f64]| -> Result<Vec<f64>> {
        Ok(affine(
            &input(slot),
            param(model, &format!("dec.{name}.ctx.w"))?,
            param(model, &format!("dec.{name}.ctx.b"))?,
        ))
    };
    let cur = ctx("cur", prev)?;
    let hist = if model.config.dual_pointer() { Some(ctx("hist", hist_slot)?) } else { None };
    Ok((cur, hist))
}

/// `u[v] = ⟨q·ctx, k·h[v]⟩ / √d_h` on unmasked nodes, `-inf` elsewhere.
pub fn pointer_compatibility(context: &[f64], h: &Tensor, mask: &[bool], q: &Tensor, k: &Tensor) -> Vec<f64> {
    let dh = q.shape()[1];
    let zero = Tensor::zeros(&[dh]);
    let query = affine(context, q, &zero);
    let scale = 1.0 / (dh as f64).sqrt();
    (0..h.rows())
        .map(|v| {
            if !mask[v] {
                return f64::NEG_INFINITY;
            }
            let key = affine(h.row(v), k, &zero);
            key.iter().zip(&query).map(|(a, b)| a * b).sum::<f64>() * scale
        })
        .collect()
}

/// `clip·tanh(u_cur) + clip·tanh(u_hist)`, keeping `-inf` on masked nodes.
pub fn fused_logits(u_cur: &[f64], u_hist: Option<&[f64]>, clip: f64) -> Vec<f64> {
    u_cur
        .iter()
        .enumerate()
        .map(|(v, &a)| {
            if a == f64::NEG_INFINITY {
                return a;
            }
            let mut s = clip * a.tanh();
            if let Some(hist) = u_hist {
                s += clip * hist[v].tanh();
            }
            s
        })
        .collect()
}

/// Softmax of [`fused_logits`]; masked nodes get probability 0.
pub fn fused_distribution(u_cur: &[f64], u_hist: Option<&[f64]>, clip: f64) -> Vec<f64> {
    let logits = fused_logits(u_cur, u_hist, clip);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() })
        .collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}
