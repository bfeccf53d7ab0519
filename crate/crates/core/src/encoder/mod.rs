//! Node encoder: feature embedding, graph attention, constraint-oriented
//! hyperedges with their losses, and multi-head fusion of hyperedge
//! embeddings into node embeddings.
//!
//! [`encode_batch`] records everything on a [`Graph`] for training. The
//! free functions below it evaluate single pieces on plain values.

use crate::error::{Error, Result};
use crate::instances::{node_features, FeatureMode, Instance};
use crate::model::{Constraint, Model, ModelConfig};
use crate::tensor::{BatchStats, Graph, ParameterStore, Tensor, Var};

/// Slope of the leaky ReLU inside graph attention.
pub const GAT_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics (returned for the running update).
    Train,
    /// Normalize with the model's running statistics.
    Eval,
}

/// One hyperedge around `master` for one constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperedge {
    pub layer: usize,
    pub master: usize,
    pub constraint: Constraint,
    /// Sorted node ids, master included.
    pub members: Vec<usize>,
    /// Gated weight of each member (1 for the master, its selection score
    /// otherwise), aligned with `members`.
    pub coefficients: Vec<f64>,
    pub penalty: f64,
}

impl Hyperedge {
    /// Member count including the master.
    pub fn degree(&self) -> usize {
        self.members.len()
    }

    /// Coefficients of the members other than the master.
    pub fn member_coefficients(&self) -> Vec<f64> {
        self.members
            .iter()
            .zip(&self.coefficients)
            .filter(|(&v, _)| v != self.master)
            .map(|(_, &c)| c)
            .collect()
    }
}

/// All hyperedges of one instance, ordered by layer, master, constraint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HyperedgeSet {
    pub edges: Vec<Hyperedge>,
}

impl HyperedgeSet {
    pub fn mean_degree(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        self.edges.iter().map(|e| e.degree() as f64).sum::<f64>() / self.edges.len() as f64
    }
}

/// Per-instance loss terms, each of shape `(B,)`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub node: Var,
    pub rec: Var,
    pub con: Var,
    pub hg: Var,
}

/// Output of [`encode_batch`].
pub struct BatchEncoding {
    /// Embeddings after graph attention, `(B, N, d)`.
    pub h0: Var,
    /// Fused node embeddings, `(B, N, d)`.
    pub h: Var,
    /// Mean of the fused rows, `(B, d)`.
    pub graph: Var,
    pub losses: Option<LossVars>,
    pub hyperedges: Vec<HyperedgeSet>,
    pub batch_stats: Option<BatchStats>,
    /// Selection scores that shaped the hyperedges, one `(B, N, N)` tensor
    /// per hyperedge layer.
    pub scores: Vec<Tensor>,
}

/// Feature tensors `(B, 1, depot_width)` and `(B, n, customer_width)`.
pub fn feature_tensors(insts: &[Instance], mode: FeatureMode) -> Result<(Tensor, Tensor)> {
    let first = insts
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty instance batch".into()))?;
    let n = first.n();
    if let Some(bad) = insts.iter().find(|i| i.n() != n) {
        return Err(Error::shape(
            "encode",
            format!("batch mixes {n} and {} customers", bad.n()),
        ));
    }
    let (wd, wc) = (mode.depot_width(), mode.customer_width());
    let mut depot = Vec::with_capacity(insts.len() * wd);
    let mut cust = Vec::with_capacity(insts.len() * n * wc);
    for inst in insts {
        let f = node_features(inst, mode);
        depot.extend_from_slice(&f.depot);
        for row in &f.customers {
            cust.extend_from_slice(row);
        }
    }
    Ok((
        Tensor::new(vec![insts.len(), 1, wd], depot)?,
        Tensor::new(vec![insts.len(), n, wc], cust)?,
    ))
}

fn linear(g: &mut Graph, store: &ParameterStore, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Single-head attention over the complete graph with self-loops, plus a
/// residual connection: `x + σ(softmax_j(σ(a_src·z_i + a_dst·z_j)) z)`.
fn gat_layer(g: &mut Graph, store: &ParameterStore, x: Var, layer: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let w = g.param(store, &format!("enc.gat{layer}.w"))?;
    let a_src = g.param(store, &format!("enc.gat{layer}.a_src"))?;
    let a_dst = g.param(store, &format!("enc.gat{layer}.a_dst"))?;
    let a_src = g.reshape(a_src, &[d, 1])?;
    let a_dst = g.reshape(a_dst, &[d, 1])?;
    let z = g.matmul(x, w)?;
    let s = g.matmul(z, a_src)?;
    let s = g.reshape(s, &[b, n])?;
    let t = g.matmul(z, a_dst)?;
    let t = g.reshape(t, &[b, n])?;
    let e = g.outer_add(s, t)?;
    let e = g.leaky_relu(e, GAT_SLOPE)?;
    let alpha = g.masked_softmax(e, None)?;
    let agg = g.bmm(alpha, z, false)?;
    let agg = g.leaky_relu(agg, GAT_SLOPE)?;
    g.add(x, agg)
}

/// Feature embedding, batch norm and the graph-attention stack.
pub fn initial_embedding_batch(
    g: &mut Graph,
    model: &Model,
    depot: Var,
    cust: Var,
    mode: BnMode,
) -> Result<(Var, Option<BatchStats>)> {
    let store = &model.params;
    let cfg = &model.config;
    let f = cfg.features();
    let (wd, wc) = (g.shape(depot)[2], g.shape(cust)[2]);
    if wd != f.depot_width() || wc != f.customer_width() {
        return Err(Error::shape(
            "initial_embedding",
            format!(
                "feature widths ({wd}, {wc}), model expects ({}, {})",
                f.depot_width(),
                f.customer_width()
            ),
        ));
    }
    let hd = linear(g, store, depot, "enc.depot")?;
    let hc = linear(g, store, cust, "enc.cust")?;
    let x = g.concat(&[hd, hc], 1)?;
    let gamma = g.param(store, "enc.bn.gamma")?;
    let beta = g.param(store, "enc.bn.beta")?;
    let (mut x, stats) = match mode {
        BnMode::Train => {
            let (y, s) = g.batch_norm(x, gamma, beta, cfg.bn_eps)?;
            (y, Some(s))
        }
        BnMode::Eval => (
            g.batch_norm_eval(x, gamma, beta, &model.bn.mean, &model.bn.var, cfg.bn_eps)?,
            None,
        ),
    };
    for l in 0..cfg.gat_layers {
        x = gat_layer(g, store, x, l)?;
    }
    Ok((x, stats))
}

/// Gates, inverse degrees and penalties of one constraint for a batch,
/// computed from selection-score values.
struct Gates {
    gate: Tensor,
    inv_degree: Tensor,
    penalty: Vec<f64>,
}

fn build_gates(
    scores: &Tensor,
    insts: &[Instance],
    cfg: &ModelConfig,
    constraint: Constraint,
    layer: usize,
    sets: &mut [HyperedgeSet],
) -> Gates {
    let (b, n) = (scores.shape()[0], scores.shape()[1]);
    let mut gate = vec![0.0; b * n * n];
    let mut inv_degree = vec![0.0; b * n];
    let mut penalty = vec![0.0; b * n];
    for (k, inst) in insts.iter().enumerate() {
        for i in 0..n {
            let row = &scores.data()[(k * n + i) * n..(k * n + i + 1) * n];
            let cands = candidates_from_row(row, i, cfg.delta);
            let (members, pen) = filter_members(&cands, inst, i, constraint, cfg.r_prox);
            let coefficients = members.iter().map(|&v| if v == i { 1.0 } else { row[v] }).collect();
            for &v in members.iter().filter(|&&v| v != i) {
                gate[(k * n + i) * n + v] = 1.0;
            }
            inv_degree[k * n + i] = 1.0 / members.len() as f64;
            penalty[k * n + i] = pen;
            sets[k].edges.push(Hyperedge {
                layer,
                master: i,
                constraint,
                members,
                coefficients,
                penalty: pen,
            });
        }
    }
    Gates {
        gate: Tensor::new(vec![b, n, n], gate).expect("gate shape"),
        inv_degree: Tensor::new(vec![b, n], inv_degree).expect("degree shape"),
        penalty,
    }
}

fn identity_batch(b: usize, n: usize) -> Tensor {
    let mut data = vec![0.0; b * n * n];
    for k in 0..b {
        for i in 0..n {
            data[(k * n + i) * n + i] = 1.0;
        }
    }
    Tensor::new(vec![b, n, n], data).expect("identity shape")
}

/// Selection scores `(xΘ)(xΘ)ᵀ / √d` for `x (B, N, d)`.
fn selection_scores_var(g: &mut Graph, store: &ParameterStore, x: Var, layer: usize) -> Result<Var> {
    let d = g.shape(x)[2];
    let sel = g.param(store, &format!("enc.hg{layer}.sel"))?;
    let p = g.matmul(x, sel)?;
    let s = g.bmm(p, p, true)?;
    g.scale(s, 1.0 / (d as f64).sqrt())
}

/// Multi-head attention of each master over its `m` hyperedge embeddings.
fn mha_fuse_var(g: &mut Graph, store: &ParameterStore, x: Var, edges: &[Var], layer: usize, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let dk = d / heads;
    let wq = g.param(store, &format!("enc.hg{layer}.q"))?;
    let wk = g.param(store, &format!("enc.hg{layer}.k"))?;
    let wv = g.param(store, &format!("enc.hg{layer}.v"))?;
    let q = g.matmul(x, wq)?;
    let mut scores = Vec::with_capacity(edges.len());
    let mut values = Vec::with_capacity(edges.len());
    for &e in edges {
        let k = g.matmul(e, wk)?;
        let v = g.matmul(e, wv)?;
        let qk = g.mul(q, k)?;
        let qk = g.reshape(qk, &[b, n, heads, dk])?;
        let u = g.sum_last(qk)?;
        let u = g.scale(u, 1.0 / (dk as f64).sqrt())?;
        scores.push(g.reshape(u, &[b, n, heads, 1])?);
        values.push(g.reshape(v, &[b, n, heads, dk])?);
    }
    let u = g.concat(&scores, 3)?;
    let w = g.masked_softmax(u, None)?;
    let mut out: Option<Var> = None;
    for (j, &v) in values.iter().enumerate() {
        let wj = g.slice(w, 3, j, 1)?;
        let wj = g.reshape(wj, &[b, n, heads])?;
        let c = g.scale_rows(v, wj)?;
        out = Some(match out {
            Some(acc) => g.add(acc, c)?,
            None => c,
        });
    }
    let out = out.ok_or_else(|| Error::shape("mha_fuse", "no hyperedges"))?;
    g.reshape(out, &[b, n, d])
}

fn gated_skip(g: &mut Graph, store: &ParameterStore, x: Var, fused: Var, layer: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let gate = g.param(store, &format!("enc.hg{layer}.gate"))?;
    let ones = g.constant(Tensor::full(&[shape[0], shape[1], 1], 1.0));
    let a = g.matmul(ones, gate)?;
    let a = g.reshape(a, &shape[..2])?;
    let scaled = g.scale_rows(fused, a)?;
    g.add(x, scaled)
}

fn sum_to_batch(g: &mut Graph, x: Var) -> Result<Var> {
    let mut x = x;
    while g.shape(x).len() > 1 {
        x = g.sum_last(x)?;
    }
    Ok(x)
}

/// One hyperedge layer: returns fused embeddings and, when requested, the
/// layer's loss terms `(node, regularizer, constraint)` per instance.
#[allow(clippy::too_many_arguments)]
fn hypergraph_layer(
    g: &mut Graph,
    model: &Model,
    x: Var,
    insts: &[Instance],
    layer: usize,
    with_losses: bool,
    frozen: Option<&Tensor>,
    sets: &mut [HyperedgeSet],
) -> Result<(Var, Option<(Var, Var, Vec<f64>)>, Tensor)> {
    let store = &model.params;
    let cfg = &model.config;
    let shape = g.shape(x).to_vec();
    let (b, n) = (shape[0], shape[1]);
    let s = selection_scores_var(g, store, x, layer)?;
    let s_values = match frozen {
        Some(t) if t.shape() != g.shape(s) => {
            return Err(Error::shape("encode", format!("frozen scores {:?}, expected {:?}", t.shape(), g.shape(s))));
        }
        Some(t) => t.clone(),
        None => g.value(s).clone(),
    };
    let eye = g.constant(identity_batch(b, n));
    let proj = if with_losses {
        let p = g.param(store, &format!("enc.hg{layer}.proj"))?;
        Some(g.matmul(x, p)?)
    } else {
        None
    };
    let mut edge_embeddings = Vec::with_capacity(cfg.constraints.len());
    let mut node_terms: Vec<Var> = Vec::new();
    let mut reg_terms: Vec<Var> = Vec::new();
    let mut penalty = vec![0.0; b];
    for &con in &cfg.constraints {
        let gates = build_gates(&s_values, insts, cfg, con, layer, sets);
        let gate = g.constant(gates.gate);
        let inv_deg = g.constant(gates.inv_degree);

        let c = g.mul(s, gate)?;
        let theta = g.add(c, eye)?;
        let rec = g.bmm(theta, x, false)?;
        let fused = if cfg.detach_coefficients {
            let cd = g.detach(c);
            let theta = g.add(cd, eye)?;
            g.bmm(theta, x, false)?
        } else {
            rec
        };
        edge_embeddings.push(g.scale_rows(fused, inv_deg)?);

        if let Some(proj) = proj {
            let resid = g.sub(proj, rec)?;
            let norms = g.row_l2_norm(resid)?;
            node_terms.push(sum_to_batch(g, norms)?);
            let abs = g.abs(c)?;
            let l1 = sum_to_batch(g, abs)?;
            let row_l2 = g.row_l2_norm(c)?;
            let l2 = sum_to_batch(g, row_l2)?;
            let l2 = g.scale(l2, cfg.lambda)?;
            reg_terms.push(g.add(l1, l2)?);
            for k in 0..b {
                penalty[k] += gates.penalty[k * n..(k + 1) * n].iter().sum::<f64>();
            }
        }
    }
    for set in sets.iter_mut() {
        set.edges.sort_by_key(|e| (e.layer, e.master));
    }
    let h = mha_fuse_var(g, store, x, &edge_embeddings, layer, cfg.heads)?;
    if !with_losses {
        return Ok((h, None, s_values));
    }
    let mut node = node_terms[0];
    let mut reg = reg_terms[0];
    for j in 1..node_terms.len() {
        node = g.add(node, node_terms[j])?;
        reg = g.add(reg, reg_terms[j])?;
    }
    Ok((h, Some((node, reg, penalty)), s_values))
}

/// Encodes a batch of same-size instances.
///
/// With `with_losses` the per-instance loss terms are recorded as well.
/// Hyperedge membership is a step function of the scores and carries no
/// gradient; the member coefficients do.
pub fn encode_batch(
    g: &mut Graph,
    model: &Model,
    insts: &[Instance],
    mode: BnMode,
    with_losses: bool,
) -> Result<BatchEncoding> {
    encode_batch_inner(g, model, insts, mode, with_losses, None)
}

/// As [`encode_batch`], but hyperedge membership comes from `scores` (one
/// `(B, N, N)` tensor per hyperedge layer) instead of the current selection
/// scores. Coefficients stay live.
pub fn encode_batch_with_scores(
    g: &mut Graph,
    model: &Model,
    insts: &[Instance],
    mode: BnMode,
    with_losses: bool,
    scores: &[Tensor],
) -> Result<BatchEncoding> {
    if model.config.uses_hypergraph() && scores.len() != model.config.hg_layers {
        return Err(Error::InvalidArgument(format!(
            "{} score tensors for {} hyperedge layers",
            scores.len(),
            model.config.hg_layers
        )));
    }
    encode_batch_inner(g, model, insts, mode, with_losses, Some(scores))
}

fn encode_batch_inner(
    g: &mut Graph,
    model: &Model,
    insts: &[Instance],
    mode: BnMode,
    with_losses: bool,
    frozen: Option<&[Tensor]>,
) -> Result<BatchEncoding> {
    let cfg = &model.config;
    let (depot, cust) = feature_tensors(insts, cfg.features())?;
    let depot = g.constant(depot);
    let cust = g.constant(cust);
    let (h0, batch_stats) = initial_embedding_batch(g, model, depot, cust, mode)?;
    let mut sets = vec![HyperedgeSet::default(); insts.len()];
    let mut h = h0;
    let mut losses = None;
    let mut scores = Vec::new();
    if cfg.uses_hypergraph() {
        let mut acc: Option<(Var, Var, Vec<f64>)> = None;
        for l in 0..cfg.hg_layers {
            let fixed = frozen.map(|f| &f[l]);
            let (next, terms, s) = hypergraph_layer(g, model, h, insts, l, with_losses, fixed, &mut sets)?;
            scores.push(s);
            h = if cfg.fusion_skip { gated_skip(g, &model.params, h, next, l)? } else { next };
            if let Some((node, reg, pen)) = terms {
                acc = Some(match acc {
                    None => (node, reg, pen),
                    Some((n0, r0, p0)) => (
                        g.add(n0, node)?,
                        g.add(r0, reg)?,
                        p0.iter().zip(&pen).map(|(a, b)| a + b).collect(),
                    ),
                });
            }
        }
        if let Some((node, reg, pen)) = acc {
            let rec = g.add(node, reg)?;
            let con = g.constant(Tensor::vector(pen));
            let weighted = g.scale(con, cfg.gamma)?;
            let hg = g.add(rec, weighted)?;
            losses = Some(LossVars { node, rec, con, hg });
        }
    } else {
        for l in 0..cfg.hg_layers {
            h = gat_layer(g, &model.params, h, cfg.gat_layers + l)?;
        }
        if with_losses {
            let zero = g.constant(Tensor::zeros(&[insts.len()]));
            losses = Some(LossVars {
                node: zero,
                rec: zero,
                con: zero,
                hg: zero,
            });
        }
    }
    let graph = g.mean_over_rows(h)?;
    Ok(BatchEncoding {
        h0,
        h,
        graph,
        losses,
        hyperedges: sets,
        batch_stats,
        scores,
    })
}

/// Loss values of one instance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EncoderLosses {
    pub node: f64,
    pub rec: f64,
    pub con: f64,
    pub hg: f64,
}

/// Plain-value encoding of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGraph {
    pub h0: Tensor,
    pub h: Tensor,
    pub graph: Tensor,
    pub hyperedges: HyperedgeSet,
    pub losses: EncoderLosses,
}

fn batch_row(t: &Tensor, k: usize) -> Tensor {
    let per = t.len() / t.shape()[0];
    Tensor::new(t.shape()[1..].to_vec(), t.data()[k * per..(k + 1) * per].to_vec()).expect("row shape")
}

/// Encodes instances with running batch-norm statistics and returns plain
/// values. Instances may differ in size.
pub fn encode(insts: &[Instance], model: &Model) -> Result<Vec<EncodedGraph>> {
    let mut out = Vec::with_capacity(insts.len());
    for inst in insts {
        let mut g = Graph::new();
        let enc = encode_batch(&mut g, model, std::slice::from_ref(inst), BnMode::Eval, true)?;
        let losses = enc.losses.expect("losses requested");
        let get = |v: Var| g.value(v).data()[0];
        out.push(EncodedGraph {
            h0: batch_row(g.value(enc.h0), 0),
            h: batch_row(g.value(enc.h), 0),
            graph: batch_row(g.value(enc.graph), 0),
            hyperedges: enc.hyperedges.into_iter().next().unwrap(),
            losses: EncoderLosses {
                node: get(losses.node),
                rec: get(losses.rec),
                con: get(losses.con),
                hg: get(losses.hg),
            },
        });
    }
    Ok(out)
}

/// `H₀` of one instance (inference-mode batch norm).
pub fn initial_embedding(inst: &Instance, model: &Model) -> Result<Tensor> {
    let (depot, cust) = feature_tensors(std::slice::from_ref(inst), model.config.features())?;
    let mut g = Graph::new();
    let depot = g.constant(depot);
    let cust = g.constant(cust);
    let (h0, _) = initial_embedding_batch(&mut g, model, depot, cust, BnMode::Eval)?;
    Ok(batch_row(g.value(h0), 0))
}

/// Score matrix `S[i][v] = ⟨Θ h_i, Θ h_v⟩ / √d` for `h0 (N, d)` and a
/// `(d, d)` projection.
pub fn selection_scores(h0: &Tensor, theta_sel: &Tensor) -> Result<Tensor> {
    if h0.shape().len() != 2 {
        return Err(Error::shape("selection_scores", format!("{:?}", h0.shape())));
    }
    let (n, d) = (h0.shape()[0], h0.shape()[1]);
    let mut store = ParameterStore::new();
    store.insert("enc.hg0.sel", crate::tensor::Group::Hg, theta_sel.clone())?;
    let mut g = Graph::new();
    let x = g.constant(h0.clone().reshaped(vec![1, n, d])?);
    let s = selection_scores_var(&mut g, &store, x, 0)?;
    g.value(s).clone().reshaped(vec![n, n])
}

fn candidates_from_row(row: &[f64], master: usize, delta: f64) -> Vec<usize> {
    (0..row.len()).filter(|&v| v != master && row[v] > delta).collect()
}

/// Candidate sets `{v ≠ i : S[i][v] > δ}` for every master `i`.
pub fn select_candidates(scores: &Tensor, delta: f64) -> Vec<Vec<usize>> {
    let n = scores.shape()[0];
    (0..n).map(|i| candidates_from_row(scores.row(i), i, delta)).collect()
}

fn filter_members(cands: &[usize], inst: &Instance, master: usize, constraint: Constraint, r_prox: f64) -> (Vec<usize>, f64) {
    let mut members = match constraint {
        Constraint::Capacity => cands.to_vec(),
        Constraint::Proximity => cands
            .iter()
            .copied()
            .filter(|&v| inst.dist(master, v) <= r_prox)
            .collect(),
    };
    let penalty = match constraint {
        Constraint::Capacity => {
            let load: f64 = inst.demand(master) as f64 + cands.iter().map(|&v| inst.demand(v) as f64).sum::<f64>();
            let q = inst.capacity as f64;
            ((load - q) / q).max(0.0)
        }
        Constraint::Proximity if cands.is_empty() => 0.0,
        Constraint::Proximity => (cands.len() - members.len()) as f64 / cands.len() as f64,
    };
    members.push(master);
    members.sort_unstable();
    (members, penalty)
}

/// Applies one constraint to a master's candidates: returns the sorted
/// member list (master included) and the violation penalty.
pub fn constraint_filter(
    candidates: &[usize],
    inst: &Instance,
    master: usize,
    constraint: Constraint,
    r_prox: f64,
) -> Result<(Vec<usize>, f64)> {
    if master >= inst.num_nodes() || candidates.iter().any(|&v| v >= inst.num_nodes() || v == master) {
        return Err(Error::InvalidArgument("candidate or master index out of range".into()));
    }
    Ok(filter_members(candidates, inst, master, constraint, r_prox))
}

/// `Σ Θ̄[v] h0[v] / Δ` over the edge's members.
pub fn hyperedge_embedding(h0: &Tensor, edge: &Hyperedge) -> Vec<f64> {
    let d = h0.cols();
    let mut e = vec![0.0; d];
    for (&v, &c) in edge.members.iter().zip(&edge.coefficients) {
        for (acc, x) in e.iter_mut().zip(h0.row(v)) {
            *acc += c * x;
        }
    }
    let delta = edge.degree() as f64;
    e.iter_mut().for_each(|x| *x /= delta);
    e
}

fn matvec_t(v: &[f64], w: &Tensor) -> Vec<f64> {
    // row vector times a (d_in, d_out) matrix
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (i, &x) in v.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(w.row(i)) {
            *o += x * wv;
        }
    }
    out
}

/// Fuses a master's edge embeddings with `heads`-head attention; also
/// returns the per-head weights `(heads × m)`.
pub fn mha_fuse(master: &[f64], edges: &[Vec<f64>], wq: &Tensor, wk: &Tensor, wv: &Tensor, heads: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = master.len();
    if edges.is_empty() || heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument("mha_fuse needs edges and a head count dividing d".into()));
    }
    let dk = d / heads;
    let q = matvec_t(master, wq);
    let ks: Vec<Vec<f64>> = edges.iter().map(|e| matvec_t(e, wk)).collect();
    let vs: Vec<Vec<f64>> = edges.iter().map(|e| matvec_t(e, wv)).collect();
    let mut out = vec![0.0; d];
    let mut weights = Vec::with_capacity(heads);
    for hd in 0..heads {
        let r = hd * dk..(hd + 1) * dk;
        let u: Vec<f64> = ks
            .iter()
            .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = u.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = ex.iter().sum();
        let w: Vec<f64> = ex.iter().map(|x| x / z).collect();
        for (j, v) in vs.iter().enumerate() {
            for i in r.clone() {
                out[i] += w[j] * v[i];
            }
        }
        weights.push(w);
    }
    Ok((out, weights))
}

/// `Σ_edges ‖h0[master] θ_proj − Σ_v Θ̄[v] h0[v]‖₂`.
pub fn node_correlation_loss(h0: &Tensor, edges: &[Hyperedge], theta_proj: &Tensor) -> f64 {
    let d = h0.cols();
    edges
        .iter()
        .map(|e| {
            let proj = matvec_t(h0.row(e.master), theta_proj);
            let rec: Vec<f64> = {
                let mut r = vec![0.0; d];
                for (&v, &c) in e.members.iter().zip(&e.coefficients) {
                    for (acc, x) in r.iter_mut().zip(h0.row(v)) {
                        *acc += c * x;
                    }
                }
                r
            };
            proj.iter().zip(&rec).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .sum()
}

/// `L_node + Σ_edges (‖c‖₁ + λ‖c‖₂)` over each edge's member coefficients.
pub fn reconstruction_loss(l_node: f64, member_coefficients: &[Vec<f64>], lambda: f64) -> f64 {
    l_node
        + member_coefficients
            .iter()
            .map(|c| {
                let l1: f64 = c.iter().map(|x| x.abs()).sum();
                let l2 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                l1 + lambda * l2
            })
            .sum::<f64>()
}

pub fn constraint_loss(penalties: &[f64]) -> f64 {
    penalties.iter().sum()
}

#[cfg(test)]
mod tests;
