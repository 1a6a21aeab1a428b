//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation in construction order, which is also a
//! topological order, so [`Graph::backward`] is a single reverse sweep that
//! visits each node once. Graphs are rebuilt per batch and borrow the
//! parameter store read-only; gradients land in a separate [`Gradients`]
//! accumulator so that stores can be shared between graphs.
//!
//! Rank-1 operands of [`Graph::matmul`] are promoted the usual way: a vector
//! on the left is a row, a vector on the right is a column, and the promoted
//! axis is dropped from the result.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Statistics a Dice node normalizes with.
#[derive(Debug, Clone, PartialEq)]
pub enum DiceStats {
    /// Mean and variance of the current batch; gradients flow through them.
    Batch,
    /// Frozen running estimates, one entry per unit.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

pub const DICE_EPS: f64 = 1e-8;

/// Operation kinds, used to target fault injection in gradient-check tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Gather,
    MatMul,
    Unary(Unary),
    Binary(Binary),
    Softmax,
    Concat,
    Dice,
    LstmCell,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Gather {
        param: ParamId,
        row: usize,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    Slice {
        a: NodeId,
        start: usize,
    },
    Unary(Unary, NodeId),
    Binary(Binary, NodeId, NodeId),
    Affine {
        a: NodeId,
        scale: f64,
    },
    AddBias {
        m: NodeId,
        b: NodeId,
    },
    Softmax(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Sum(NodeId),
    Dice {
        x: NodeId,
        alpha: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Prelu {
        x: NodeId,
        alpha: NodeId,
    },
    LstmStep {
        gx: NodeId,
        row: usize,
        u: NodeId,
        prev: Option<NodeId>,
        time: Option<[NodeId; 3]>,
    },
    LogLoss {
        pred: NodeId,
        labels: Vec<f64>,
        eps: f64,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Gather { .. } => OpKind::Gather,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Unary(u, _) => OpKind::Unary(*u),
            Op::Binary(b, _, _) => OpKind::Binary(*b),
            Op::Softmax(_) => OpKind::Softmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Dice { .. } => OpKind::Dice,
            Op::LstmStep { .. } => OpKind::LstmCell,
            _ => return None,
        })
    }
}

struct Node {
    value: DenseArray,
    op: Op,
}

/// Per-node gradients left behind by a backward sweep.
pub struct NodeGradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGradients {
    /// Gradient of the loss with respect to `node`, or `None` when the node
    /// does not influence the loss.
    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    fault: Option<OpKind>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mm_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, Vec<usize>)> {
    let (m, ka, a_vec) = match a {
        [k] => (1, *k, true),
        [m, k] => (*m, *k, false),
        _ => return None,
    };
    let (kb, n, b_vec) = match b {
        [k] => (*k, 1, true),
        [k, n] => (*k, *n, false),
        _ => return None,
    };
    if ka != kb {
        return None;
    }
    let out = match (a_vec, b_vec) {
        (false, false) => vec![m, n],
        (false, true) => vec![m],
        (true, false) => vec![n],
        (true, true) => vec![1],
    };
    Some((m, ka, n, out))
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            fault: None,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Negates the backward rule of every node of the given kind. Only meant
    /// for checking that the gradient checker catches broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: DenseArray, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn vals(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.values()
    }

    pub fn input(&mut self, value: DenseArray) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn input_vector(&mut self, values: Vec<f64>) -> NodeId {
        self.input(DenseArray::vector(values))
    }

    /// Leaf node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let value = self.store.value(id).clone();
        let node = self.push(value, Op::Param(id));
        self.param_nodes.insert(id, node);
        node
    }

    /// Row `index` of an embedding table; backward touches only that row.
    pub fn gather(&mut self, table: ParamId, index: usize) -> Result<NodeId> {
        let t = self.store.get(table);
        let rows = t.value.rows();
        if t.value.shape().len() != 2 || index >= rows {
            return Err(Error::IndexOutOfRange {
                table: t.name.clone(),
                index,
                rows,
            });
        }
        let row = t.value.row(index).to_vec();
        Ok(self.push(
            DenseArray::vector(row),
            Op::Gather {
                param: table,
                row: index,
            },
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k, n, out_shape) =
            mm_dims(self.shape(a), self.shape(b)).ok_or_else(|| Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            })?;
        let av = self.vals(a);
        let bv = self.vals(b);
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &av[i * k..(i + 1) * k];
                *o = dot(row, bv);
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = av[i * k + p];
                    if s != 0.0 {
                        for (o, &bb) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                            *o += s * bb;
                        }
                    }
                }
            }
        }
        let value = DenseArray::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = match v.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "transpose",
                    left: s.to_vec(),
                    right: vec![],
                })
            }
        };
        let src = v.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = DenseArray::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = DenseArray::new(shape.to_vec(), self.vals(a).to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Row `r` of a matrix, as a vector.
    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        match *self.shape(a) {
            [rows, cols] if r < rows => {
                let v = self.vals(a)[r * cols..(r + 1) * cols].to_vec();
                Ok(self.push(DenseArray::vector(v), Op::Slice { a, start: r * cols }))
            }
            _ => Err(Error::ShapeMismatch {
                op: "row",
                left: self.shape(a).to_vec(),
                right: vec![r],
            }),
        }
    }

    /// Elements `start..start + len` of a vector.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        match *self.shape(a) {
            [n] if len > 0 && start + len <= n => {
                let v = self.vals(a)[start..start + len].to_vec();
                Ok(self.push(DenseArray::vector(v), Op::Slice { a, start }))
            }
            _ => Err(Error::ShapeMismatch {
                op: "slice",
                left: self.shape(a).to_vec(),
                right: vec![start, len],
            }),
        }
    }

    /// One fused LSTM step. Row `row` of `gx` `[n × 4d_h]` holds the input
    /// part of the gate pre-activations `[f̃, ĩ, c̃, õ]`, to which `u · h_prev`
    /// is added (`u` is `[4d_h × d_h]`). `prev` is the previous step's output,
    /// or `None` for a zero state. `time` optionally supplies `[n × d_h]`
    /// matrices `[T_δ, T_s, o_t]` whose row `row` scales the forget and input
    /// paths and shifts `õ`. The result is `[h, c, f, i, g, o]`, each of width
    /// `d_h`:
    ///
    /// ```text
    /// c = σ(f̃)·T_δ·c_prev + σ(ĩ)·T_s·tanh(c̃)
    /// h = σ(õ + o_t)·tanh(c)
    /// ```
    pub fn lstm_step(
        &mut self,
        gx: NodeId,
        row: usize,
        u: NodeId,
        prev: Option<NodeId>,
        time: Option<[NodeId; 3]>,
    ) -> Result<NodeId> {
        let bad = |g: &Self, other: NodeId| Error::ShapeMismatch {
            op: "lstm_step",
            left: g.shape(u).to_vec(),
            right: g.shape(other).to_vec(),
        };
        let dh = match *self.shape(u) {
            [r, c] if r == 4 * c && c > 0 => c,
            _ => return Err(bad(self, u)),
        };
        match *self.shape(gx) {
            [n, c] if c == 4 * dh && row < n => {}
            _ => return Err(bad(self, gx)),
        }
        if let Some(p) = prev {
            if self.shape(p) != [6 * dh] {
                return Err(bad(self, p));
            }
        }
        if let Some(t) = time {
            for m in t {
                match *self.shape(m) {
                    [n, c] if c == dh && row < n => {}
                    _ => return Err(bad(self, m)),
                }
            }
        }
        let mut pre = self.vals(gx)[row * 4 * dh..(row + 1) * 4 * dh].to_vec();
        let zero = vec![0.0; 2 * dh];
        let state = match prev {
            Some(p) => &self.vals(p)[..2 * dh],
            None => &zero[..],
        };
        let (hp, cp) = state.split_at(dh);
        if prev.is_some() {
            let uv = self.vals(u);
            for (r, x) in pre.iter_mut().enumerate() {
                *x += dot(&uv[r * dh..(r + 1) * dh], hp);
            }
        }
        let mut out = vec![0.0; 6 * dh];
        for j in 0..dh {
            let f = sigmoid(pre[j]);
            let i = sigmoid(pre[dh + j]);
            let gc = pre[2 * dh + j].tanh();
            let (td, ts, ot) = match time {
                Some([a, b, c]) => {
                    let k = row * dh + j;
                    (self.vals(a)[k], self.vals(b)[k], self.vals(c)[k])
                }
                None => (1.0, 1.0, 0.0),
            };
            let o = sigmoid(pre[3 * dh + j] + ot);
            let c = f * td * cp[j] + i * ts * gc;
            out[j] = o * c.tanh();
            out[dh + j] = c;
            out[2 * dh + j] = f;
            out[3 * dh + j] = i;
            out[4 * dh + j] = gc;
            out[5 * dh + j] = o;
        }
        Ok(self.push(
            DenseArray::vector(out),
            Op::LstmStep {
                gx,
                row,
                u,
                prev,
                time,
            },
        ))
    }

    pub fn unary(&mut self, op: Unary, a: NodeId) -> NodeId {
        let src = self.value(a);
        let f: fn(f64) -> f64 = match op {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Abs => f64::abs,
        };
        let out: Vec<f64> = src.values().iter().map(|&x| f(x)).collect();
        let value = DenseArray::new(src.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Unary(op, a))
    }

    pub fn binary(&mut self, op: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "pointwise",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (av, bv) = (self.vals(a), self.vals(b));
        let out: Vec<f64> = match op {
            Binary::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Binary::Sub => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
            Binary::Mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
        };
        let value = DenseArray::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Binary(op, a, b)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Exp, a)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Unary::Abs, a)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let src = self.value(a);
        let out = src.values().iter().map(|x| scale * x + shift).collect();
        let value = DenseArray::new(src.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Affine { a, scale })
    }

    /// Adds a bias vector to every row of a matrix (or to a vector).
    pub fn add_bias(&mut self, m: NodeId, b: NodeId) -> Result<NodeId> {
        let cols = self.value(m).cols();
        if self.shape(b) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(m).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bv = self.vals(b);
        let mut out = self.vals(m).to_vec();
        for row in out.chunks_mut(cols) {
            add_into(row, bv);
        }
        let value = DenseArray::new(self.shape(m).to_vec(), out)?;
        Ok(self.push(value, Op::AddBias { m, b }))
    }

    /// Overflow-safe softmax over a vector.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        if src.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                left: src.shape().to_vec(),
                right: vec![],
            });
        }
        let xs = src.values();
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= total);
        Ok(self.push(DenseArray::vector(out), Op::Softmax(a)))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::EmptyInput { op: "concat" })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: base,
                right: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.vals(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = DenseArray::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::EmptyInput { op: "concat" })?;
        let axis = self.shape(first).len() - 1;
        self.concat(parts, axis)
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let mut reshaped = Vec::with_capacity(rows.len());
        for &r in rows {
            let len = self.value(r).len();
            reshaped.push(self.reshape(r, &[1, len])?);
        }
        self.concat(&reshaped, 0)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.vals(a).iter().sum();
        self.push(DenseArray::scalar(s), Op::Sum(a))
    }

    /// Data-adaptive activation over a `[batch × units]` matrix:
    /// `p = σ((x − μ)/√(σ² + ε))`, `out = p·x + (1 − p)·α·x`.
    pub fn dice(&mut self, x: NodeId, alpha: NodeId, stats: &DiceStats) -> Result<NodeId> {
        let (b, h) = match self.shape(x) {
            [b, h] => (*b, *h),
            s => {
                return Err(Error::ShapeMismatch {
                    op: "dice",
                    left: s.to_vec(),
                    right: vec![],
                })
            }
        };
        if self.shape(alpha) != [h] {
            return Err(Error::ShapeMismatch {
                op: "dice",
                left: vec![h],
                right: self.shape(alpha).to_vec(),
            });
        }
        let xv = self.vals(x);
        let (mean, var, batch) = match stats {
            DiceStats::Batch => {
                let mut mean = vec![0.0; h];
                for row in xv.chunks(h) {
                    add_into(&mut mean, row);
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; h];
                for row in xv.chunks(h) {
                    for j in 0..h {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= b as f64);
                (mean, var, true)
            }
            DiceStats::Fixed { mean, var } => {
                if mean.len() != h || var.len() != h {
                    return Err(Error::ShapeMismatch {
                        op: "dice",
                        left: vec![h],
                        right: vec![mean.len()],
                    });
                }
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + DICE_EPS).sqrt()).collect();
        let av = self.vals(alpha);
        let mut out = vec![0.0; b * h];
        for (r, row) in xv.chunks(h).enumerate() {
            for j in 0..h {
                let p = sigmoid((row[j] - mean[j]) * inv_std[j]);
                out[r * h + j] = row[j] * (av[j] + p * (1.0 - av[j]));
            }
        }
        let value = DenseArray::new(vec![b, h], out)?;
        Ok(self.push(
            value,
            Op::Dice {
                x,
                alpha,
                mean,
                inv_std,
                batch,
            },
        ))
    }

    /// Batch mean and biased variance a batch-mode Dice node normalized with.
    pub fn dice_batch_stats(&self, id: NodeId) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.nodes[id.0].op {
            Op::Dice {
                mean,
                inv_std,
                batch: true,
                ..
            } => {
                let var = inv_std.iter().map(|s| 1.0 / (s * s) - DICE_EPS).collect();
                Some((mean.clone(), var))
            }
            _ => None,
        }
    }

    /// Parametric rectifier: `x` for `x > 0`, `α·x` otherwise.
    pub fn prelu(&mut self, x: NodeId, alpha: NodeId) -> Result<NodeId> {
        let h = self.value(x).cols();
        if self.shape(alpha) != [h] {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                left: vec![h],
                right: self.shape(alpha).to_vec(),
            });
        }
        let av = self.vals(alpha);
        let out = self
            .vals(x)
            .chunks(h)
            .flat_map(|row| {
                row.iter()
                    .zip(av)
                    .map(|(&v, &a)| if v > 0.0 { v } else { a * v })
            })
            .collect();
        let value = DenseArray::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::Prelu { x, alpha }))
    }

    /// Mean binary negative log-likelihood of `pred` (probabilities) against
    /// fixed labels, with predictions clipped to `[eps, 1 − eps]`.
    pub fn logloss(&mut self, pred: NodeId, labels: &[f64], eps: f64) -> Result<NodeId> {
        let p = self.vals(pred);
        if p.is_empty() || labels.is_empty() {
            return Err(Error::EmptyInput { op: "logloss" });
        }
        if p.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "logloss",
                left: vec![p.len()],
                right: vec![labels.len()],
            });
        }
        let loss = crate::metrics::logloss_clipped(labels, p, eps)?;
        Ok(self.push(
            DenseArray::scalar(loss),
            Op::LogLoss {
                pred,
                labels: labels.to_vec(),
                eps,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added into
    /// `grads`, so repeated calls accumulate.
    pub fn backward(&self, loss: NodeId, grads: &mut Gradients) -> Result<NodeGradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);

        fn acc<'a>(g: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut [f64] {
            g[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(grad) = g[i].take() else { continue };
            let node = &self.nodes[i];
            let flip = self.fault.is_some() && node.op.kind() == self.fault;
            let sign = if flip { -1.0 } else { 1.0 };
            let out = node.value.values();
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let buf = grads.buffer(*pid, grad.len());
                    add_into(buf, &grad);
                }
                Op::Gather { param, row } => {
                    let table = self.store.value(*param);
                    let cols = table.cols();
                    let buf = grads.buffer(*param, table.len());
                    for (d, s) in buf[row * cols..(row + 1) * cols].iter_mut().zip(&grad) {
                        *d += sign * s;
                    }
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let av = self.vals(a);
                    let bv = self.vals(b);
                    if n == 1 {
                        // matrix · vector: dA = dc ⊗ b, db = Aᵀ · dc
                        let da = acc(&mut g, a, m * k);
                        for r in 0..m {
                            let gr = sign * grad[r];
                            if gr != 0.0 {
                                for (d, &bb) in da[r * k..(r + 1) * k].iter_mut().zip(bv) {
                                    *d += gr * bb;
                                }
                            }
                        }
                        let db = acc(&mut g, b, k);
                        for r in 0..m {
                            let gr = sign * grad[r];
                            if gr != 0.0 {
                                for (d, &aa) in db.iter_mut().zip(&av[r * k..(r + 1) * k]) {
                                    *d += gr * aa;
                                }
                            }
                        }
                    } else {
                        {
                            // dA = dC · Bᵀ
                            let da = acc(&mut g, a, m * k);
                            for r in 0..m {
                                let grow = &grad[r * n..(r + 1) * n];
                                for p in 0..k {
                                    let brow = &bv[p * n..(p + 1) * n];
                                    let s = dot(grow, brow);
                                    da[r * k + p] += sign * s;
                                }
                            }
                        }
                        // dB = Aᵀ · dC
                        let db = acc(&mut g, b, k * n);
                        for r in 0..m {
                            let grow = &grad[r * n..(r + 1) * n];
                            for p in 0..k {
                                let s = sign * av[r * k + p];
                                if s != 0.0 {
                                    for (d, gg) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                        *d += s * gg;
                                    }
                                }
                            }
                        }
                    }
                }
                &Op::Transpose(a) => {
                    let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                    let da = acc(&mut g, a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += grad[j * r + i];
                        }
                    }
                }
                &Op::Reshape(a) => {
                    add_into(acc(&mut g, a, grad.len()), &grad);
                }
                &Op::Slice { a, start } => {
                    let len = self.value(a).len();
                    add_into(&mut acc(&mut g, a, len)[start..start + grad.len()], &grad);
                }
                &Op::Unary(u, a) => {
                    let x = self.vals(a);
                    let da = acc(&mut g, a, grad.len());
                    for j in 0..grad.len() {
                        let local = match u {
                            Unary::Sigmoid => out[j] * (1.0 - out[j]),
                            Unary::Tanh => 1.0 - out[j] * out[j],
                            Unary::Exp => out[j],
                            Unary::Abs => {
                                if x[j] > 0.0 {
                                    1.0
                                } else if x[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        da[j] += sign * local * grad[j];
                    }
                }
                &Op::Binary(op, a, b) => {
                    let len = grad.len();
                    match op {
                        Binary::Add | Binary::Sub => {
                            let da = acc(&mut g, a, len);
                            for (d, gg) in da.iter_mut().zip(&grad) {
                                *d += sign * gg;
                            }
                            let sb = if op == Binary::Sub { -sign } else { sign };
                            let db = acc(&mut g, b, len);
                            for (d, gg) in db.iter_mut().zip(&grad) {
                                *d += sb * gg;
                            }
                        }
                        Binary::Mul => {
                            let (av, bv) = (self.vals(a), self.vals(b));
                            let da = acc(&mut g, a, len);
                            for j in 0..len {
                                da[j] += sign * grad[j] * bv[j];
                            }
                            let db = acc(&mut g, b, len);
                            for j in 0..len {
                                db[j] += sign * grad[j] * av[j];
                            }
                        }
                    }
                }
                &Op::Affine { a, scale } => {
                    let da = acc(&mut g, a, grad.len());
                    for (d, gg) in da.iter_mut().zip(&grad) {
                        *d += scale * gg;
                    }
                }
                &Op::AddBias { m, b } => {
                    add_into(acc(&mut g, m, grad.len()), &grad);
                    let cols = self.shape(b)[0];
                    let db = acc(&mut g, b, cols);
                    for row in grad.chunks(cols) {
                        add_into(db, row);
                    }
                }
                &Op::Softmax(a) => {
                    let dot: f64 = grad.iter().zip(out).map(|(x, y)| x * y).sum();
                    let da = acc(&mut g, a, grad.len());
                    for j in 0..grad.len() {
                        da[j] += sign * out[j] * (grad[j] - dot);
                    }
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let total = shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let chunk = self.shape(p)[*axis] * inner;
                        let plen = self.value(p).len();
                        let dp = acc(&mut g, p, plen);
                        for o in 0..outer {
                            let src = &grad[o * total + offset..o * total + offset + chunk];
                            for (d, s) in dp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += sign * s;
                            }
                        }
                        offset += chunk;
                    }
                }
                &Op::Sum(a) => {
                    let len = self.value(a).len();
                    let da = acc(&mut g, a, len);
                    da.iter_mut().for_each(|d| *d += grad[0]);
                }
                Op::Dice {
                    x,
                    alpha,
                    mean,
                    inv_std,
                    batch,
                } => {
                    let (x, alpha) = (*x, *alpha);
                    let h = inv_std.len();
                    let xv = self.vals(x);
                    let av = self.vals(alpha);
                    let b = xv.len() / h;
                    let mut dx = vec![0.0; xv.len()];
                    let mut dalpha = vec![0.0; h];
                    let mut gz = vec![0.0; xv.len()];
                    let mut z = vec![0.0; xv.len()];
                    for r in 0..b {
                        for j in 0..h {
                            let idx = r * h + j;
                            let zz = (xv[idx] - mean[j]) * inv_std[j];
                            let p = sigmoid(zz);
                            let gg = grad[idx];
                            dx[idx] = gg * (av[j] + p * (1.0 - av[j]));
                            dalpha[j] += gg * xv[idx] * (1.0 - p);
                            gz[idx] = gg * xv[idx] * (1.0 - av[j]) * p * (1.0 - p);
                            z[idx] = zz;
                        }
                    }
                    if *batch {
                        // normalization backward through batch mean and variance
                        let mut mean_gz = vec![0.0; h];
                        let mut mean_gzz = vec![0.0; h];
                        for r in 0..b {
                            for j in 0..h {
                                mean_gz[j] += gz[r * h + j];
                                mean_gzz[j] += gz[r * h + j] * z[r * h + j];
                            }
                        }
                        for j in 0..h {
                            mean_gz[j] /= b as f64;
                            mean_gzz[j] /= b as f64;
                        }
                        for r in 0..b {
                            for j in 0..h {
                                let idx = r * h + j;
                                dx[idx] +=
                                    inv_std[j] * (gz[idx] - mean_gz[j] - z[idx] * mean_gzz[j]);
                            }
                        }
                    } else {
                        for r in 0..b {
                            for j in 0..h {
                                dx[r * h + j] += inv_std[j] * gz[r * h + j];
                            }
                        }
                    }
                    let dxa = acc(&mut g, x, xv.len());
                    for (d, s) in dxa.iter_mut().zip(&dx) {
                        *d += sign * s;
                    }
                    let daa = acc(&mut g, alpha, h);
                    for (d, s) in daa.iter_mut().zip(&dalpha) {
                        *d += sign * s;
                    }
                }
                &Op::Prelu { x, alpha } => {
                    let xv = self.vals(x);
                    let av = self.vals(alpha);
                    let h = av.len();
                    let mut dalpha = vec![0.0; h];
                    let dxa = acc(&mut g, x, xv.len());
                    for (idx, (&v, gg)) in xv.iter().zip(&grad).enumerate() {
                        let j = idx % h;
                        if v > 0.0 {
                            dxa[idx] += gg;
                        } else {
                            dxa[idx] += av[j] * gg;
                            dalpha[j] += v * gg;
                        }
                    }
                    add_into(acc(&mut g, alpha, h), &dalpha);
                }
                Op::LstmStep {
                    gx,
                    row,
                    u,
                    prev,
                    time,
                } => {
                    let (gx, row, u, prev, time) = (*gx, *row, *u, *prev, *time);
                    let dh = out.len() / 6;
                    let zero = vec![0.0; 2 * dh];
                    let state = match prev {
                        Some(p) => &self.vals(p)[..2 * dh],
                        None => &zero[..],
                    };
                    let (hp, cp) = state.split_at(dh);
                    let mut dpre = vec![0.0; 4 * dh];
                    let mut dcp = vec![0.0; dh];
                    let mut dtime = [vec![0.0; dh], vec![0.0; dh], vec![0.0; dh]];
                    for j in 0..dh {
                        let (c, f, i, gc, o) = (
                            out[dh + j],
                            out[2 * dh + j],
                            out[3 * dh + j],
                            out[4 * dh + j],
                            out[5 * dh + j],
                        );
                        let (td, ts) = match time {
                            Some([a, b, _]) => {
                                (self.vals(a)[row * dh + j], self.vals(b)[row * dh + j])
                            }
                            None => (1.0, 1.0),
                        };
                        let tc = c.tanh();
                        let go = grad[5 * dh + j] + grad[j] * tc;
                        let gcell = grad[dh + j] + grad[j] * o * (1.0 - tc * tc);
                        let gf = grad[2 * dh + j] + gcell * td * cp[j];
                        let gi = grad[3 * dh + j] + gcell * ts * gc;
                        let gg = grad[4 * dh + j] + gcell * i * ts;
                        dcp[j] = sign * gcell * f * td;
                        dpre[j] = sign * gf * f * (1.0 - f);
                        dpre[dh + j] = sign * gi * i * (1.0 - i);
                        dpre[2 * dh + j] = sign * gg * (1.0 - gc * gc);
                        let dout = sign * go * o * (1.0 - o);
                        dpre[3 * dh + j] = dout;
                        dtime[0][j] = sign * gcell * f * cp[j];
                        dtime[1][j] = sign * gcell * i * gc;
                        dtime[2][j] = dout;
                    }
                    let rows = self.value(gx).rows();
                    let dgx = acc(&mut g, gx, rows * 4 * dh);
                    add_into(&mut dgx[row * 4 * dh..(row + 1) * 4 * dh], &dpre);
                    // a zero state still gives U a (zero) gradient
                    let du = acc(&mut g, u, 4 * dh * dh);
                    if let Some(p) = prev {
                        // dU = dpre ⊗ h_prev, dh_prev = Uᵀ · dpre
                        for (r, &d) in dpre.iter().enumerate() {
                            if d != 0.0 {
                                for (x, &h) in du[r * dh..(r + 1) * dh].iter_mut().zip(hp) {
                                    *x += d * h;
                                }
                            }
                        }
                        let uv = self.vals(u);
                        let dprev = acc(&mut g, p, 6 * dh);
                        for (r, &d) in dpre.iter().enumerate() {
                            if d != 0.0 {
                                for (x, &w) in dprev[..dh].iter_mut().zip(&uv[r * dh..(r + 1) * dh])
                                {
                                    *x += d * w;
                                }
                            }
                        }
                        add_into(&mut dprev[dh..2 * dh], &dcp);
                    }
                    if let Some(t) = time {
                        for (m, d) in t.into_iter().zip(&dtime) {
                            let rows = self.value(m).rows();
                            let dm = acc(&mut g, m, rows * dh);
                            add_into(&mut dm[row * dh..(row + 1) * dh], d);
                        }
                    }
                }
                Op::LogLoss { pred, labels, eps } => {
                    let p = self.vals(*pred);
                    let n = p.len() as f64;
                    let dp = acc(&mut g, *pred, p.len());
                    for j in 0..p.len() {
                        if p[j] > *eps && p[j] < 1.0 - eps {
                            let y = labels[j];
                            dp[j] += grad[0] * (-y / p[j] + (1.0 - y) / (1.0 - p[j])) / n;
                        }
                    }
                }
            }
            g[i] = Some(grad);
        }
        Ok(NodeGradients { grads: g })
    }
}
