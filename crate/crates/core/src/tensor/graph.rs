use std::collections::{BTreeMap, HashMap};

use super::gemm::{gemm, Operand};
use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-feature statistics of one training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Tanh(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Softmax(Var),
    LogSoftmax { x: Var, probs: Vec<f64>, mask: Option<Vec<bool>> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    SumAll(Var),
    SumLast(Var),
    MeanAxis { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    OuterAdd(Var, Var),
    RowL2Norm(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_names: Vec<String>,
    param_vars: HashMap<String, Var>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.by_name.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.by_name.keys()
    }

    /// Keeps only the entries for which `keep` returns true.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.by_name.retain(|k, _| keep(k));
    }

    /// `self += factor * other`, inserting missing entries.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += factor * b;
                    }
                }
                None => {
                    let mut t = g.clone();
                    t.scale_assign(factor);
                    self.by_name.insert(name.clone(), t);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_name.values_mut() {
            g.scale_assign(factor);
        }
    }

    /// Largest absolute entry over all gradients.
    pub fn max_abs(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => self.inputs(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleRows(a, b)
            | Op::MatMul(a, b)
            | Op::OuterAdd(a, b)
            | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::LeakyRelu(x, _)
            | Op::Abs(x)
            | Op::Softmax(x)
            | Op::LogSoftmax { x, .. }
            | Op::SumAll(x)
            | Op::SumLast(x)
            | Op::MeanAxis { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::GatherRows { x, .. }
            | Op::RowL2Norm(x) => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a named parameter. Repeated lookups of one name share a node
    /// so their gradient contributions accumulate.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(v) = self.param_vars.get(name) {
            return Ok(*v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?
            .clone();
        self.param_names.push(name.to_string());
        let v = self.push(value, Op::Param(self.param_names.len() - 1));
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Same value, no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape() != [tx.cols()] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % c])
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.map(x, |a| a * factor);
        Ok(self.push(v, Op::Scale(x, factor)))
    }

    /// Multiplies every last-axis row of `x` by the matching entry of `s`,
    /// whose shape is `x`'s shape without the last axis.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let lead = &tx.shape()[..tx.shape().len().saturating_sub(1)];
        if ts.shape() != lead {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} by {:?}", tx.shape(), ts.shape()),
            ));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * ts.data()[i / c])
            .collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(v, Op::ScaleRows(x, s)))
    }

    /// `x (..., k) · w (k, n) -> (..., n)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape().len() != 2 || tx.shape().is_empty() || tx.cols() != tw.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (m, k, n) = (tx.rows(), tx.cols(), tw.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, Operand::plain(tx.data()), Operand::plain(tw.data()), &mut out, 0.0);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MatMul(x, w)))
    }

    /// Batched product `a (B, m, k) · b (B, k, n)`, or `a · bᵀ` with `b`
    /// stored as `(B, n, k)` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || Error::shape("bmm", format!("{:?} x {:?} (trans_b={trans_b})", ta.shape(), tb.shape()));
        if ta.shape().len() != 3 || tb.shape().len() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let sa = &ta.data()[i * m * k..(i + 1) * m * k];
            let sb = &tb.data()[i * k * n..(i + 1) * k * n];
            let ob = if trans_b { Operand::t(sb) } else { Operand::plain(sb) };
            gemm(m, k, n, Operand::plain(sa), ob, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let v = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(v, Op::Bmm { a, b, trans_b }))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, f64::tanh);
        Ok(self.push(v, Op::Tanh(x)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let v = self.map(x, |a| if a > 0.0 { a } else { slope * a });
        Ok(self.push(v, Op::LeakyRelu(x, slope)))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, f64::abs);
        Ok(self.push(v, Op::Abs(x)))
    }

    fn check_mask(&self, op: &'static str, x: Var, mask: Option<&[bool]>) -> Result<()> {
        let t = self.value(x);
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(Error::shape(op, format!("mask length {} for {:?}", m.len(), t.shape())));
            }
            let c = t.cols();
            if m.chunks(c).any(|row| !row.iter().any(|&ok| ok)) {
                return Err(Error::InvalidArgument(format!("{op}: row with every entry masked")));
            }
        }
        Ok(())
    }

    /// Softmax over the last axis. `mask[i] == true` marks a valid entry;
    /// masked entries get probability exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask("masked_softmax", x, mask)?;
        let t = self.value(x);
        let c = t.cols();
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let valid = |j: usize| mask.is_none_or(|m| m[r * c + j]);
            let max = (0..c)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                if valid(j) {
                    let e = (row[j] - max).exp();
                    out[r * c + j] = e;
                    sum += e;
                }
            }
            for v in &mut out[r * c..(r + 1) * c] {
                *v /= sum;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax(x)))
    }

    /// Log-softmax over the last axis; masked entries hold `-inf`.
    pub fn masked_log_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_mask("masked_log_softmax", x, mask)?;
        let t = self.value(x);
        let c = t.cols();
        let mut out = vec![f64::NEG_INFINITY; t.len()];
        let mut probs = vec![0.0; t.len()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let valid = |j: usize| mask.is_none_or(|m| m[r * c + j]);
            let max = (0..c)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..c).filter(|&j| valid(j)).map(|j| (row[j] - max).exp()).sum();
            let lse = max + sum.ln();
            for j in (0..c).filter(|&j| valid(j)) {
                out[r * c + j] = row[j] - lse;
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LogSoftmax {
                x,
                probs,
                mask: mask.map(<[bool]>::to_vec),
            },
        ))
    }

    /// Training-mode batch normalization over every axis but the last.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        self.check_affine_shapes(x, gamma, beta)?;
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += t.data()[i * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let d = t.data()[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let v = self.normalize(x, gamma, beta, &mean, inv_std, true)?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.check_affine_shapes(x, gamma, beta)?;
        if mean.len() != self.value(x).cols() || var.len() != mean.len() {
            return Err(Error::shape("batch_norm", "running statistics width"));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn check_affine_shapes(&self, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let c = self.value(x).cols();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{:?} with gamma {:?}, beta {:?}",
                    self.value(x).shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        Ok(())
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
    ) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        for (i, v) in t.data().iter().enumerate() {
            let j = i % c;
            xhat[i] = (v - mean[j]) * inv_std[j];
            out[i] = g[j] * xhat[i] + b[j];
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Sum of every entry, as a 0-d tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x)))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().is_empty() {
            return Err(Error::shape("sum_last", "scalar input"));
        }
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let v = Tensor::new(t.shape()[..t.shape().len() - 1].to_vec(), data)?;
        Ok(self.push(v, Op::SumLast(x)))
    }

    /// Mean over one axis, which is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() || t.shape()[axis] == 0 {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, size, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for s in 0..size {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[(o * size + s) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= size as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MeanAxis { x, axis }))
    }

    /// Mean over the second-to-last axis: `(..., rows, c) -> (..., c)`.
    pub fn mean_over_rows(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("mean_over_rows", format!("{:?}", self.shape(x))));
        }
        self.mean_axis(x, rank - 2)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {:?}", base)));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, base)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() || start + len > t.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, size, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * size + start) * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    /// Splits `x` along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        if axis < self.shape(x).len() && start != self.shape(x)[axis] {
            return Err(Error::shape("split", "sizes do not cover the axis"));
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// For `x (B, N, ...)` picks row `idx[b]` of batch entry `b`:
    /// result `(B, ...)`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 2 || t.shape()[0] != idx.len() || idx.iter().any(|&i| i >= t.shape()[1]) {
            return Err(Error::shape(
                "gather_rows",
                format!("{:?} with {} indices", t.shape(), idx.len()),
            ));
        }
        let n = t.shape()[1];
        let inner: usize = t.shape()[2..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for (b, &i) in idx.iter().enumerate() {
            let from = (b * n + i) * inner;
            out.extend_from_slice(&t.data()[from..from + inner]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&t.shape()[2..]);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// `s (B, N)`, `t (B, M)` -> `y (B, N, M)` with `y[b,i,j] = s[b,i] + t[b,j]`.
    pub fn outer_add(&mut self, s: Var, t: Var) -> Result<Var> {
        let (ts, tt) = (self.value(s), self.value(t));
        if ts.shape().len() != 2 || tt.shape().len() != 2 || ts.shape()[0] != tt.shape()[0] {
            return Err(Error::shape("outer_add", format!("{:?}, {:?}", ts.shape(), tt.shape())));
        }
        let (b, n, m) = (ts.shape()[0], ts.shape()[1], tt.shape()[1]);
        let mut out = Vec::with_capacity(b * n * m);
        for k in 0..b {
            for i in 0..n {
                let si = ts.data()[k * n + i];
                out.extend(tt.data()[k * m..(k + 1) * m].iter().map(|tj| si + tj));
            }
        }
        let v = Tensor::new(vec![b, n, m], out)?;
        Ok(self.push(v, Op::OuterAdd(s, t)))
    }

    /// Euclidean norm of every last-axis row.
    pub fn row_l2_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().is_empty() {
            return Err(Error::shape("row_l2_norm", "scalar input"));
        }
        let data = (0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let v = Tensor::new(t.shape()[..t.shape().len() - 1].to_vec(), data)?;
        Ok(self.push(v, Op::RowL2Norm(x)))
    }

    /// Sum of absolute values, as a 0-d tensor.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        let a = self.abs(x)?;
        self.sum_all(a)
    }

    /// Euclidean norm of all entries, as a 0-d tensor.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        let r = self.row_l2_norm(flat)?;
        Ok(r)
    }

    /// Reverse sweep from a one-element `loss`. Every parameter recorded on
    /// the graph gets an entry; unreached parameters get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(p) = node.op {
                out.insert(self.param_names[p].clone(), g);
                continue;
            }
            self.backprop(&node.op, &node.value, g, &mut grads);
        }
        for (idx, name) in self.param_names.iter().enumerate() {
            if out.get(name).is_none() {
                let v = self.param_vars[name];
                debug_assert!(matches!(self.nodes[v.0].op, Op::Param(p) if p == idx));
                out.insert(name.clone(), Tensor::zeros(self.shape(v)));
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape")
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    let neg = g.data().iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, self.like(*b, neg));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*bias) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        d[i % c] += v;
                    }
                    self.accumulate(grads, *bias, self.like(*bias, d));
                }
                self.accumulate(grads, *x, g);
            }
            Op::Scale(x, f) => {
                let d = g.data().iter().map(|v| v * f).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let c = tx.cols();
                if self.wants(*x) {
                    let d = g.data().iter().enumerate().map(|(i, v)| v * ts.data()[i / c]).collect();
                    self.accumulate(grads, *x, self.like(*x, d));
                }
                if self.wants(*s) {
                    let d = (0..ts.len())
                        .map(|r| {
                            g.data()[r * c..(r + 1) * c]
                                .iter()
                                .zip(&tx.data()[r * c..(r + 1) * c])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *s, self.like(*s, d));
                }
            }
            Op::MatMul(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, k, n) = (tx.rows(), tx.cols(), tw.shape()[1]);
                if self.wants(*x) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, Operand::plain(g.data()), Operand::t(tw.data()), &mut d, 0.0);
                    self.accumulate(grads, *x, self.like(*x, d));
                }
                if self.wants(*w) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, Operand::t(tx.data()), Operand::plain(g.data()), &mut d, 0.0);
                    self.accumulate(grads, *w, self.like(*w, d));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                if self.wants(*a) {
                    let mut d = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                        // trans_b: b stored n x k, so g (m x n) * b
                        let ob = if *trans_b { Operand::plain(bi) } else { Operand::t(bi) };
                        gemm(m, n, k, Operand::plain(gi), ob, &mut d[i * m * k..(i + 1) * m * k], 0.0);
                    }
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, Operand::t(gi), Operand::plain(ai), di, 0.0);
                        } else {
                            gemm(k, m, n, Operand::t(ai), Operand::plain(gi), di, 0.0);
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Tanh(x) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::LeakyRelu(x, slope) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { gv * slope })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Abs(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, v)| {
                        if *v > 0.0 {
                            *gv
                        } else if *v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::LogSoftmax { x, probs, mask } => {
                let c = out.cols();
                let mut d = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let valid = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
                    let gsum: f64 = (0..c).filter(|&j| valid(j)).map(|j| g.data()[r * c + j]).sum();
                    for j in (0..c).filter(|&j| valid(j)) {
                        d[r * c + j] = g.data()[r * c + j] - probs[r * c + j] * gsum;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = out.cols();
                let rows = out.rows();
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (i, gv) in g.data().iter().enumerate() {
                    sum_dy[i % c] += gv;
                    sum_dy_xhat[i % c] += gv * xhat[i];
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, self.like(*gamma, sum_dy_xhat.clone()));
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, self.like(*beta, sum_dy.clone()));
                }
                if self.wants(*x) {
                    let r = rows as f64;
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| {
                            let j = i % c;
                            if *train {
                                gam[j] * inv_std[j] / r
                                    * (r * gv - sum_dy[j] - xhat[i] * sum_dy_xhat[j])
                            } else {
                                gv * gam[j] * inv_std[j]
                            }
                        })
                        .collect();
                    self.accumulate(grads, *x, self.like(*x, d));
                }
            }
            Op::SumAll(x) => {
                let gv = g.item();
                let n = self.value(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![gv; n]));
            }
            Op::SumLast(x) => {
                let c = self.value(*x).cols();
                let d = (0..self.value(*x).len()).map(|i| g.data()[i / c]).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::MeanAxis { x, axis } => {
                let (outer, size, inner) = split_axis(self.shape(*x), *axis);
                let mut d = vec![0.0; outer * size * inner];
                for o in 0..outer {
                    for s in 0..size {
                        for i in 0..inner {
                            d[(o * size + s) * inner + i] = g.data()[o * inner + i] / size as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let size = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(outer * size * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[from..from + size * inner]);
                        }
                        self.accumulate(grads, *p, self.like(*p, d));
                    }
                    offset += size;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, size, inner) = split_axis(self.shape(*x), *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; outer * size * inner];
                for o in 0..outer {
                    let to = (o * size + start) * inner;
                    d[to..to + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Reshape(x) => {
                let d = g.into_data();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::GatherRows { x, idx } => {
                let shape = self.shape(*x);
                let n = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut d = vec![0.0; self.value(*x).len()];
                for (b, &i) in idx.iter().enumerate() {
                    let to = (b * n + i) * inner;
                    for q in 0..inner {
                        d[to + q] += g.data()[b * inner + q];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::OuterAdd(s, t) => {
                let (b, n, m) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                if self.wants(*s) {
                    let d = (0..b * n).map(|r| g.data()[r * m..(r + 1) * m].iter().sum()).collect();
                    self.accumulate(grads, *s, self.like(*s, d));
                }
                if self.wants(*t) {
                    let mut d = vec![0.0; b * m];
                    for k in 0..b {
                        for i in 0..n {
                            for j in 0..m {
                                d[k * m + j] += g.data()[(k * n + i) * m + j];
                            }
                        }
                    }
                    self.accumulate(grads, *t, self.like(*t, d));
                }
            }
            Op::RowL2Norm(x) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let d = tx
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let norm = out.data()[i / c];
                        if norm > 0.0 {
                            g.data()[i / c] * v / norm
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
        }
    }
}
