//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s in creation
//! order, which is a topological order. [`Graph::backward`] consumes the
//! graph and walks the nodes from last to first exactly once, accumulating
//! adjoints into the parameter blocks and leaves that asked for them.

use std::collections::HashMap;

use super::tensor::{gemm, Layout};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Key-validity and causality rules for [`Graph::attention`].
#[derive(Clone, Debug, Default)]
pub struct AttnMask {
    /// Query row `i` may attend to key `j` only when `j <= offset + i`.
    pub causal_offset: Option<usize>,
    /// Per-sample key validity, `batch * lk` entries.
    pub key_valid: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn full() -> Self {
        Self::default()
    }

    fn allows(&self, b: usize, lk: usize, i: usize, j: usize) -> bool {
        if let Some(off) = self.causal_offset {
            if j > off + i {
                return false;
            }
        }
        match &self.key_valid {
            Some(valid) => valid[b * lk + j],
            None => true,
        }
    }
}

/// Shape description for [`Graph::attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

/// Precomputed rotation table for [`Graph::rope`]: `cos`/`sin` per
/// (position, rotation pair).
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    pub len: usize,
    pub head_dim: usize,
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddTiled(Var, Var),
    AddRepeated(Var, Var),
    TileRows(Var, usize),
    Silu(Var),
    Tanh(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    MeanPool { x: Var, group: usize },
    SliceCols { x: Var, start: usize },
    ConcatSeq { a: Var, b: Var, batch: usize, la: usize, lb: usize },
    SliceSeq { x: Var, batch: usize, len: usize, start: usize, count: usize },
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f32> },
    Rope { x: Var, table: RopeTable },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape. One training step owns one graph.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    /// Reductions keep their f64 accumulator next to the rounded value.
    wide: HashMap<usize, f64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph: trainable parameters and `leaf_grad` inputs
    /// receive gradients on [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            wide: HashMap::new(),
        }
    }

    /// A graph for inference only; nothing requires gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    /// Value of a one-element `v`. Scalar reductions report their f64
    /// accumulator rather than the rounded f32.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.wide.get(&v.0) {
            Some(&w) => Ok(w),
            None => Ok(self.value(v).item()? as f64),
        }
    }

    fn push_reduction(&mut self, wide: f64, op: Op, needs_grad: bool) -> Var {
        let v = self.push(Tensor::scalar(wide as f32), op, needs_grad);
        self.wide.insert(v.0, wide);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter block, once per graph. Frozen blocks enter as
    /// constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs = !store.is_frozen(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, needs);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `x[r] += y[r % rows(y)]`; with a 1-row `y` this is a bias add.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let d = xv.cols();
        if yv.cols() != d || xv.rows() % yv.rows() != 0 {
            return Err(Error::shape("add_tiled", xv.shape(), yv.shape()));
        }
        let m = yv.rows();
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let src = yv.row(r % m);
            row.iter_mut().zip(src).for_each(|(o, s)| *o += s);
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddTiled(x, y), ng))
    }

    /// `x[r] += y[r / (rows(x) / rows(y))]`: one `y` row per contiguous group.
    pub fn add_repeated(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let d = xv.cols();
        if yv.cols() != d || xv.rows() % yv.rows() != 0 {
            return Err(Error::shape("add_repeated", xv.shape(), yv.shape()));
        }
        let group = xv.rows() / yv.rows();
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let src = yv.row(r / group);
            row.iter_mut().zip(src).for_each(|(o, s)| *o += s);
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRepeated(x, y), ng))
    }

    /// Stacks `n` copies of `x` along the rows.
    pub fn tile_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut data = Vec::with_capacity(xv.len() * n);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::from_parts(vec![xv.rows() * n, d], data);
        let ng = self.ng(x);
        self.push(out, Op::TileRows(x, n), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("rms_norm requires eps > 0"));
        }
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.cols();
        if gv.len() != d {
            return Err(Error::shape("rms_norm", xv.shape(), gv.shape()));
        }
        let mut out = xv.data().to_vec();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            row.iter_mut().zip(gv.data()).for_each(|(v, g)| *v *= inv * g);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::contract("embedding table must be 2-D"));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::contract(format!("token id {id} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new([ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    /// Mean over each consecutive group of `group` rows: `[n·g, d] → [n, d]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if group == 0 || xv.rows() % group != 0 {
            return Err(Error::shape("mean_pool", xv.shape(), &[group]));
        }
        let n = xv.rows() / group;
        let mut out = vec![0.0f32; n * d];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let dst = &mut out[(r / group) * d..(r / group + 1) * d];
            dst.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / group as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::MeanPool { x, group }, ng))
    }

    /// Columns `start..start+len` of a row-major matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let data: Vec<f32> = xv.data().chunks(c).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let out = Tensor::from_parts(vec![xv.rows(), len], data);
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    /// Per-sample concatenation along the sequence axis:
    /// `[B·la, d] ++ [B·lb, d] → [B·(la+lb), d]`.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = av.cols();
        if bv.cols() != d || av.rows() % batch != 0 || bv.rows() % batch != 0 {
            return Err(Error::shape("concat_seq", av.shape(), bv.shape()));
        }
        let (la, lb) = (av.rows() / batch, bv.rows() / batch);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for s in 0..batch {
            data.extend_from_slice(&av.data()[s * la * d..(s + 1) * la * d]);
            data.extend_from_slice(&bv.data()[s * lb * d..(s + 1) * lb * d]);
        }
        let out = Tensor::from_parts(vec![batch * (la + lb), d], data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatSeq { a, b, batch, la, lb }, ng))
    }

    /// Per-sample rows `start..start+count` of a `[B·len, d]` sequence batch.
    pub fn slice_seq(&mut self, x: Var, batch: usize, start: usize, count: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if batch == 0 || xv.rows() % batch != 0 {
            return Err(Error::shape("slice_seq", xv.shape(), &[batch]));
        }
        let len = xv.rows() / batch;
        if start + count > len || count == 0 {
            return Err(Error::shape("slice_seq", xv.shape(), &[start, count]));
        }
        let mut data = Vec::with_capacity(batch * count * d);
        for s in 0..batch {
            let base = (s * len + start) * d;
            data.extend_from_slice(&xv.data()[base..base + count * d]);
        }
        let out = Tensor::from_parts(vec![batch * count, d], data);
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::SliceSeq {
                x,
                batch,
                len,
                start,
                count,
            },
            ng,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push_reduction(s, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let ng = self.ng(x);
        self.push_reduction(s, Op::MeanAll(x), ng)
    }

    /// Mean squared difference over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Mean cross-entropy of `[N, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if lv.rows() != targets.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0f64;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            if t >= c {
                return Err(Error::contract(format!("class index {t} >= {c}")));
            }
            softmax_in_place(row);
            loss -= (row[t].max(1e-30) as f64).ln();
        }
        let loss = loss / targets.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push_reduction(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention with grouped key/value heads.
    ///
    /// `q` is `[B·lq, q_heads·head_dim]`, `k` and `v` are
    /// `[B·lk, kv_heads·head_dim]`; query head `h` reads kv head
    /// `h / (q_heads / kv_heads)`. Queries with no admissible key produce
    /// zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape, mask: &AttnMask) -> Result<Var> {
        let AttnShape {
            batch,
            lq,
            lk,
            q_heads,
            kv_heads,
            head_dim,
        } = shape;
        if kv_heads == 0 || q_heads % kv_heads != 0 {
            return Err(Error::config("kv_heads", format!("{q_heads} query heads not divisible by {kv_heads}")));
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != [batch * lq, q_heads * head_dim] {
            return Err(Error::shape("attention.q", qv.shape(), &[batch * lq, q_heads * head_dim]));
        }
        if kv.shape() != [batch * lk, kv_heads * head_dim] || vv.shape() != kv.shape() {
            return Err(Error::shape("attention.kv", kv.shape(), vv.shape()));
        }
        if let Some(valid) = &mask.key_valid {
            if valid.len() != batch * lk {
                return Err(Error::shape("attention.mask", &[valid.len()], &[batch * lk]));
            }
        }
        let group = q_heads / kv_heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let (qd, kd, vd) = (q_heads * head_dim, kv_heads * head_dim, kv_heads * head_dim);
        let mut out = vec![0.0f32; batch * lq * qd];
        let mut probs = vec![0.0f32; batch * q_heads * lq * lk];
        let mut logits = vec![0.0f32; lk];
        for b in 0..batch {
            for h in 0..q_heads {
                let kh = h / group;
                for i in 0..lq {
                    let qrow = &qv.data()[(b * lq + i) * qd + h * head_dim..][..head_dim];
                    let mut any = false;
                    for j in 0..lk {
                        if mask.allows(b, lk, i, j) {
                            let krow = &kv.data()[(b * lk + j) * kd + kh * head_dim..][..head_dim];
                            logits[j] = dot(qrow, krow) * scale;
                            any = true;
                        } else {
                            logits[j] = f32::NEG_INFINITY;
                        }
                    }
                    if !any {
                        continue;
                    }
                    softmax_in_place(&mut logits);
                    let p = &mut probs[((b * q_heads + h) * lq + i) * lk..][..lk];
                    p.copy_from_slice(&logits);
                    let orow = &mut out[(b * lq + i) * qd + h * head_dim..][..head_dim];
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let vrow = &vv.data()[(b * lk + j) * vd + kh * head_dim..][..head_dim];
                        axpy(p[j], vrow, orow);
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![batch * lq, qd], out);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, shape, probs }, ng))
    }

    /// Applies a rotary table to `[B·len, heads·head_dim]` rows.
    pub fn rope(&mut self, x: Var, table: &RopeTable) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d % table.head_dim != 0 || xv.rows() % table.len != 0 {
            return Err(Error::shape("rope", xv.shape(), &[table.len, table.head_dim]));
        }
        let out = rope_apply_raw(xv, table, false);
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                table: table.clone(),
            },
            ng,
        ))
    }

    /// Runs reverse accumulation from a scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        let nodes = self.nodes;
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            backprop_node(&nodes, idx, &g, &mut grads)?;
        }
        let mut params = HashMap::new();
        for (id, var) in self.params {
            if let Some(g) = grads[var.0].take() {
                params.insert(id, g);
            }
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (i, g)))
            .collect();
        Ok(Gradients { params, leaves })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn set_param(&mut self, id: ParamId, g: Tensor) {
        self.params.insert(id, g);
    }

    /// Adds `other` into `self`, block by block.
    pub fn accumulate(&mut self, other: Gradients) -> Result<()> {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => *acc = acc.add(&g)?,
                None => {
                    self.params.insert(id, g);
                }
            }
        }
        Ok(())
    }
}

fn accum(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) -> Result<()> {
    if !nodes[v.0].needs_grad {
        return Ok(());
    }
    match &mut grads[v.0] {
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::shape("grad accumulate", acc.shape(), g.shape()));
            }
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn backprop_node(nodes: &[Node], idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let ng = |v: Var| nodes[v.0].needs_grad;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
            if ng(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), Layout::Normal, bv.data(), Layout::Transposed, &mut da, false);
                accum(grads, nodes, *a, Tensor::from_parts(av.shape().to_vec(), da))?;
            }
            if ng(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, av.data(), Layout::Transposed, g.data(), Layout::Normal, &mut db, false);
                accum(grads, nodes, *b, Tensor::from_parts(bv.shape().to_vec(), db))?;
            }
        }
        Op::Add(a, b) => {
            accum(grads, nodes, *a, g.clone())?;
            accum(grads, nodes, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accum(grads, nodes, *a, g.clone())?;
            if ng(*b) {
                accum(grads, nodes, *b, g.scale(-1.0))?;
            }
        }
        Op::Mul(a, b) => {
            if ng(*a) {
                accum(grads, nodes, *a, g.zip_map(val(*b), "mul.grad", |x, y| x * y)?)?;
            }
            if ng(*b) {
                accum(grads, nodes, *b, g.zip_map(val(*a), "mul.grad", |x, y| x * y)?)?;
            }
        }
        Op::Scale(a, s) => accum(grads, nodes, *a, g.scale(*s))?,
        Op::AddTiled(x, y) => {
            accum(grads, nodes, *x, g.clone())?;
            if ng(*y) {
                let yv = val(*y);
                let (m, d) = (yv.rows(), yv.cols());
                let mut dy = vec![0.0f32; m * d];
                for (r, row) in g.data().chunks(d).enumerate() {
                    let dst = &mut dy[(r % m) * d..(r % m + 1) * d];
                    dst.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                accum(grads, nodes, *y, Tensor::from_parts(yv.shape().to_vec(), dy))?;
            }
        }
        Op::AddRepeated(x, y) => {
            accum(grads, nodes, *x, g.clone())?;
            if ng(*y) {
                let yv = val(*y);
                let d = yv.cols();
                let group = g.rows() / yv.rows();
                let mut dy = vec![0.0f32; yv.len()];
                for (r, row) in g.data().chunks(d).enumerate() {
                    let dst = &mut dy[(r / group) * d..(r / group + 1) * d];
                    dst.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                accum(grads, nodes, *y, Tensor::from_parts(yv.shape().to_vec(), dy))?;
            }
        }
        Op::TileRows(x, n) => {
            let xv = val(*x);
            let chunk = xv.len();
            let mut dx = vec![0.0f32; chunk];
            for c in 0..*n {
                dx.iter_mut()
                    .zip(&g.data()[c * chunk..(c + 1) * chunk])
                    .for_each(|(o, v)| *o += v);
            }
            accum(grads, nodes, *x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
        }
        Op::Silu(x) => {
            let dx = val(*x).zip_map(g, "silu.grad", |v, gv| {
                let s = 1.0 / (1.0 + (-v).exp());
                gv * s * (1.0 + v * (1.0 - s))
            })?;
            accum(grads, nodes, *x, dx)?;
        }
        Op::Tanh(x) => {
            let y = &nodes[idx].value;
            let dx = y.zip_map(g, "tanh.grad", |t, gv| gv * (1.0 - t * t))?;
            accum(grads, nodes, *x, dx)?;
        }
        Op::Softmax(x) => {
            let y = &nodes[idx].value;
            let c = y.cols();
            let mut dx = vec![0.0f32; y.len()];
            for ((yr, gr), dr) in y.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
                let inner = dot(yr, gr);
                for j in 0..c {
                    dr[j] = yr[j] * (gr[j] - inner);
                }
            }
            accum(grads, nodes, *x, Tensor::from_parts(y.shape().to_vec(), dx))?;
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (xv, gv) = (val(*x), val(*gain));
            let d = xv.cols();
            if ng(*x) {
                let mut dx = vec![0.0f32; xv.len()];
                for (r, ((xr, gr), dr)) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let inv = inv_rms[r];
                    // y = x·inv·gain ; dL/dx = inv·(gain⊙g) − x·inv³·mean(x⊙gain⊙g)
                    let mut s = 0.0f32;
                    for j in 0..d {
                        s += xr[j] * gv.data()[j] * gr[j];
                    }
                    let coef = inv * inv * inv * s / d as f32;
                    for j in 0..d {
                        dr[j] = inv * gv.data()[j] * gr[j] - xr[j] * coef;
                    }
                }
                accum(grads, nodes, *x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
            }
            if ng(*gain) {
                let mut dg = vec![0.0f32; d];
                for (r, (xr, gr)) in xv.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    let inv = inv_rms[r];
                    for j in 0..d {
                        dg[j] += xr[j] * inv * gr[j];
                    }
                }
                accum(grads, nodes, *gain, Tensor::from_parts(gv.shape().to_vec(), dg))?;
            }
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let d = tv.cols();
            let mut dt = vec![0.0f32; tv.len()];
            for (r, &id) in ids.iter().enumerate() {
                let src = &g.data()[r * d..(r + 1) * d];
                dt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(o, v)| *o += v);
            }
            accum(grads, nodes, *table, Tensor::from_parts(tv.shape().to_vec(), dt))?;
        }
        Op::Reshape(x) => {
            let shape = val(*x).shape().to_vec();
            accum(grads, nodes, *x, Tensor::from_parts(shape, g.data().to_vec()))?;
        }
        Op::Transpose(x) => accum(grads, nodes, *x, g.transpose()?)?,
        Op::MeanPool { x, group } => {
            let xv = val(*x);
            let d = xv.cols();
            let inv = 1.0 / *group as f32;
            let mut dx = vec![0.0f32; xv.len()];
            for (r, row) in dx.chunks_mut(d).enumerate() {
                let src = g.row(r / group);
                row.iter_mut().zip(src).for_each(|(o, v)| *o = v * inv);
            }
            accum(grads, nodes, *x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let (c, len) = (xv.cols(), g.cols());
            let mut dx = vec![0.0f32; xv.len()];
            for (dr, gr) in dx.chunks_mut(c).zip(g.data().chunks(len)) {
                dr[*start..*start + len].copy_from_slice(gr);
            }
            accum(grads, nodes, *x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
        }
        Op::ConcatSeq { a, b, batch, la, lb } => {
            let d = g.cols();
            let mut da = Vec::with_capacity(batch * la * d);
            let mut db = Vec::with_capacity(batch * lb * d);
            for s in 0..*batch {
                let base = s * (la + lb) * d;
                da.extend_from_slice(&g.data()[base..base + la * d]);
                db.extend_from_slice(&g.data()[base + la * d..base + (la + lb) * d]);
            }
            accum(grads, nodes, *a, Tensor::from_parts(val(*a).shape().to_vec(), da))?;
            accum(grads, nodes, *b, Tensor::from_parts(val(*b).shape().to_vec(), db))?;
        }
        Op::SliceSeq {
            x,
            batch,
            len,
            start,
            count,
        } => {
            let xv = val(*x);
            let d = xv.cols();
            let mut dx = vec![0.0f32; xv.len()];
            for s in 0..*batch {
                let dst = (s * len + start) * d;
                dx[dst..dst + count * d].copy_from_slice(&g.data()[s * count * d..(s + 1) * count * d]);
            }
            accum(grads, nodes, *x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
        }
        Op::SumAll(x) => {
            let gv = g.data()[0];
            accum(grads, nodes, *x, Tensor::full(val(*x).shape().to_vec(), gv))?;
        }
        Op::MeanAll(x) => {
            let xv = val(*x);
            let gv = g.data()[0] / xv.len() as f32;
            accum(grads, nodes, *x, Tensor::full(xv.shape().to_vec(), gv))?;
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let lv = val(*logits);
            let c = lv.cols();
            let scale = g.data()[0] / targets.len() as f32;
            let mut dl = probs.clone();
            for (row, &t) in dl.chunks_mut(c).zip(targets) {
                row[t] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            accum(grads, nodes, *logits, Tensor::from_parts(lv.shape().to_vec(), dl))?;
        }
        Op::Attention { q, k, v, shape, probs } => {
            let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), g, shape, probs);
            accum(grads, nodes, *q, dq)?;
            accum(grads, nodes, *k, dk)?;
            accum(grads, nodes, *v, dv)?;
        }
        Op::Rope { x, table } => {
            accum(grads, nodes, *x, rope_apply_raw(g, table, true))?;
        }
    }
    Ok(())
}

fn attention_backward(
    qv: &Tensor,
    kv: &Tensor,
    vv: &Tensor,
    g: &Tensor,
    shape: &AttnShape,
    probs: &[f32],
) -> (Tensor, Tensor, Tensor) {
    let AttnShape {
        batch,
        lq,
        lk,
        q_heads,
        kv_heads,
        head_dim,
    } = *shape;
    let group = q_heads / kv_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let (qd, kd) = (q_heads * head_dim, kv_heads * head_dim);
    let mut dq = vec![0.0f32; qv.len()];
    let mut dk = vec![0.0f32; kv.len()];
    let mut dv = vec![0.0f32; vv.len()];
    let mut dp = vec![0.0f32; lk];
    for b in 0..batch {
        for h in 0..q_heads {
            let kh = h / group;
            for i in 0..lq {
                let p = &probs[((b * q_heads + h) * lq + i) * lk..][..lk];
                let go = &g.data()[(b * lq + i) * qd + h * head_dim..][..head_dim];
                let mut inner = 0.0f32;
                for j in 0..lk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let voff = (b * lk + j) * kd + kh * head_dim;
                    dp[j] = dot(go, &vv.data()[voff..voff + head_dim]);
                    inner += p[j] * dp[j];
                    axpy(p[j], go, &mut dv[voff..voff + head_dim]);
                }
                let qoff = (b * lq + i) * qd + h * head_dim;
                for j in 0..lk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - inner) * scale;
                    let koff = (b * lk + j) * kd + kh * head_dim;
                    axpy(ds, &kv.data()[koff..koff + head_dim], &mut dq[qoff..qoff + head_dim]);
                    axpy(ds, &qv.data()[qoff..qoff + head_dim], &mut dk[koff..koff + head_dim]);
                }
            }
        }
    }
    (
        Tensor::from_parts(qv.shape().to_vec(), dq),
        Tensor::from_parts(kv.shape().to_vec(), dk),
        Tensor::from_parts(vv.shape().to_vec(), dv),
    )
}

/// Rotates consecutive pairs of every head; `inverse` rotates by the
/// negated angle (the adjoint of the forward rotation).
pub(crate) fn rope_apply_raw(x: &Tensor, table: &RopeTable, inverse: bool) -> Tensor {
    let d = x.cols();
    let hd = table.head_dim;
    let pairs = hd / 2;
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(d).enumerate() {
        let pos = r % table.len;
        let cs = &table.cos[pos * pairs..(pos + 1) * pairs];
        let sn = &table.sin[pos * pairs..(pos + 1) * pairs];
        for head in row.chunks_mut(hd) {
            for p in 0..pairs {
                let (a, b) = (head[2 * p], head[2 * p + 1]);
                let s = if inverse { -sn[p] } else { sn[p] };
                head[2 * p] = a * cs[p] - b * s;
                head[2 * p + 1] = a * s + b * cs[p];
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = if *v == f32::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    y.iter_mut().zip(x).for_each(|(o, v)| *o += alpha * v);
}
