use std::collections::HashMap;

use super::dense::{axis_extents, gemm_nn, gemm_nt, gemm_tn};
use super::params::{Gradients, ParamId, ParamStore};
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type ElementFn = Box<dyn Fn(f64) -> f64>;

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    AddBias(Var, Var),
    Repeat { x: Var, axis: usize, count: usize },
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    Sum(Var),
    SumSquares(Var),
    BceWithLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    Elementwise { x: Var, derivative: ElementFn },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Eager tape. Every op evaluates immediately and records how to push an
/// output gradient back to its inputs. A graph is built per batch and dropped.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax preserves shape")
}

/// Numerically stable `log(1 + exp(z))`.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push("constant", value, Op::Constant)
    }

    /// Trainable leaf. Repeated calls for the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, TensorError> {
        if let Some(&v) = self.param_leaves.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.get(id).clone(), Op::Param(id))?;
        self.param_leaves.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm_nn(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push("batch_matmul", value, Op::BatchMatMul(a, b))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 || s.len() > 3 {
            return Err(TensorError::InvalidAxis { op: "transpose_last", axis: 1, rank: s.len() });
        }
        let value = transpose_last_tensor(t);
        self.push("transpose_last", value, Op::TransposeLast(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || ta.len() == 1 || tb.len() == 1 {
            Ok(())
        } else {
            Err(shape_err(op, ta, tb))
        }
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() == tb.len() && ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(ta.shape().to_vec(), data).expect("same shape")
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            let data = ta.data().iter().map(|x| f(*x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data).expect("same shape")
        } else {
            let x = ta.data()[0];
            let data = tb.data().iter().map(|y| f(x, *y)).collect();
            Tensor::new(tb.shape().to_vec(), data).expect("same shape")
        }
    }

    /// Elementwise sum; operands must share a shape or one must hold a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_shapes("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_shapes("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_shapes("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("relu", value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| sigmoid(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("sigmoid", value, Op::Sigmoid(x))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        derivative: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("map", value, Op::Elementwise { x, derivative: Box::new(derivative) })
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, rank: t.shape().len() });
        }
        let value = softmax_forward(t, axis);
        self.push("softmax", value, Op::Softmax { x, axis })
    }

    /// Adds vector `b[n]` to every length-`n` row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [n] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let bias = tb.data();
        let data = tx.data().chunks(n).flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, b))
    }

    /// Inserts a new axis at `axis` holding `count` copies of `x`.
    pub fn repeat(&mut self, x: Var, axis: usize, count: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let rank = t.shape().len();
        if axis > rank {
            return Err(TensorError::InvalidAxis { op: "repeat", axis, rank });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis..].iter().product();
        let mut data = Vec::with_capacity(t.len() * count);
        for o in 0..outer {
            let block = &t.data()[o * inner..(o + 1) * inner];
            for _ in 0..count {
                data.extend_from_slice(block);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.insert(axis, count);
        let value = Tensor::new(shape, data)?;
        self.push("repeat", value, Op::Repeat { x, axis, count })
    }

    /// Concatenates along an existing axis; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank: base.len() });
        }
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", self.value(*first), self.value(*p)));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_len: usize = parts.iter().map(|p| self.value(*p).shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_len;
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let mut expanded = Vec::with_capacity(parts.len());
        for p in parts {
            let mut shape = self.value(*p).shape().to_vec();
            if axis > shape.len() {
                return Err(TensorError::InvalidAxis { op: "stack", axis, rank: shape.len() });
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(*p, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    /// Row lookup: `table[V,n]` indexed by `indices` gives `[indices.len(), n]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(TensorError::InvalidAxis { op: "gather_rows", axis: 0, rank: t.shape().len() });
        }
        let (rows, n) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, len: rows });
            }
            data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(vec![indices.len(), n], data)?;
        self.push("gather_rows", value, Op::GatherRows { table, indices: indices.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::Empty { op: "mean" });
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var, TensorError> {
        let total = self.value(x).sum_squares();
        self.push("sum_squares", Tensor::scalar(total), Op::SumSquares(x))
    }

    /// `sum_i w_i * BCE(sigmoid(z_i), y_i)` computed directly on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var, TensorError> {
        let z = self.value(logits);
        if z.len() != targets.len() || z.len() != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: z.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let total = z
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .filter(|(_, w)| **w != 0.0)
            .map(|((z, y), w)| w * (softplus(*z) - y * z))
            .sum();
        self.push(
            "bce_with_logits",
            Tensor::scalar(total),
            Op::BceWithLogits { logits, targets: targets.to_vec(), weights: weights.to_vec() },
        )
    }

    /// Mean categorical cross-entropy of row-wise softmax over `logits[B,C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let z = self.value(logits);
        let s = z.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: s.to_vec(),
                right: vec![labels.len()],
            });
        }
        let classes = s[1];
        let mut total = 0.0;
        for (row, &label) in z.data().chunks(classes).zip(labels) {
            if label >= classes {
                return Err(TensorError::IndexOutOfRange { index: label, len: classes });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        self.push("softmax_cross_entropy", value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() })
    }

    /// Reverse sweep from a scalar `loss`, adding each parameter's total
    /// derivative into `grads`. Constants receive nothing.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), tb.data(), &mut da, m, k, n);
                    let mut db = vec![0.0; k * n];
                    gemm_tn(ta.data(), g.data(), &mut db, m, k, n);
                    accumulate(&mut adj, *a, ta.shape(), da);
                    accumulate(&mut adj, *b, tb.shape(), db);
                }
                Op::BatchMatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (batch, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                    let mut da = vec![0.0; batch * m * k];
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        gemm_nt(gi, &tb.data()[i * k * n..(i + 1) * k * n], &mut da[i * m * k..(i + 1) * m * k], m, k, n);
                        gemm_tn(&ta.data()[i * m * k..(i + 1) * m * k], gi, &mut db[i * k * n..(i + 1) * k * n], m, k, n);
                    }
                    accumulate(&mut adj, *a, ta.shape(), da);
                    accumulate(&mut adj, *b, tb.shape(), db);
                }
                Op::TransposeLast(x) => {
                    let back = transpose_last_tensor(&g);
                    accumulate(&mut adj, *x, self.value(*x).shape(), back.into_data());
                }
                Op::Reshape(x) => {
                    accumulate(&mut adj, *x, self.value(*x).shape(), g.into_data());
                }
                Op::Add(a, b) => {
                    self.accumulate_broadcast(&mut adj, *a, g.data().to_vec());
                    self.accumulate_broadcast(&mut adj, *b, g.into_data());
                }
                Op::Sub(a, b) => {
                    self.accumulate_broadcast(&mut adj, *a, g.data().to_vec());
                    self.accumulate_broadcast(&mut adj, *b, g.data().iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let n = g.len();
                    let pick = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
                    let da: Vec<f64> = (0..n).map(|i| g.data()[i] * pick(tb, i)).collect();
                    let db: Vec<f64> = (0..n).map(|i| g.data()[i] * pick(ta, i)).collect();
                    self.accumulate_broadcast(&mut adj, *a, da);
                    self.accumulate_broadcast(&mut adj, *b, db);
                }
                Op::Scale(x, factor) => {
                    let d = g.data().iter().map(|v| v * factor).collect();
                    accumulate(&mut adj, *x, self.value(*x).shape(), d);
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let d = g.data().iter().zip(tx.data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut adj, *x, tx.shape(), d);
                }
                Op::Sigmoid(x) => {
                    let d = g.data().iter().zip(node.value.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut adj, *x, self.value(*x).shape(), d);
                }
                Op::Elementwise { x, derivative } => {
                    let tx = self.value(*x);
                    let d = g.data().iter().zip(tx.data()).map(|(g, v)| g * derivative(*v)).collect();
                    accumulate(&mut adj, *x, tx.shape(), d);
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = axis_extents(y.shape(), *axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut adj, *x, y.shape(), d);
                }
                Op::AddBias(x, b) => {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut adj, *b, &[n], db);
                    accumulate(&mut adj, *x, self.value(*x).shape(), g.into_data());
                }
                Op::Repeat { x, axis, count } => {
                    let tx = self.value(*x);
                    let outer: usize = tx.shape()[..*axis].iter().product();
                    let inner: usize = tx.shape()[*axis..].iter().product();
                    let mut d = vec![0.0; tx.len()];
                    for o in 0..outer {
                        for c in 0..*count {
                            let src = &g.data()[(o * count + c) * inner..(o * count + c + 1) * inner];
                            for (acc, v) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                    accumulate(&mut adj, *x, tx.shape(), d);
                }
                Op::Concat { parts, axis } => {
                    let s = node.value.shape();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let row = s[*axis] * inner;
                    let mut offset = 0;
                    for p in parts {
                        let tp = self.value(*p);
                        let chunk = tp.shape()[*axis] * inner;
                        let mut d = Vec::with_capacity(tp.len());
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * row + offset..o * row + offset + chunk]);
                        }
                        offset += chunk;
                        accumulate(&mut adj, *p, tp.shape(), d);
                    }
                }
                Op::GatherRows { table, indices } => {
                    let tt = self.value(*table);
                    let n = tt.shape()[1];
                    let mut d = vec![0.0; tt.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for (acc, v) in d[i * n..(i + 1) * n].iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut adj, *table, tt.shape(), d);
                }
                Op::Sum(x) => {
                    let tx = self.value(*x);
                    accumulate(&mut adj, *x, tx.shape(), vec![g.data()[0]; tx.len()]);
                }
                Op::SumSquares(x) => {
                    let tx = self.value(*x);
                    let s = g.data()[0];
                    let d = tx.data().iter().map(|v| 2.0 * s * v).collect();
                    accumulate(&mut adj, *x, tx.shape(), d);
                }
                Op::BceWithLogits { logits, targets, weights } => {
                    let tz = self.value(*logits);
                    let s = g.data()[0];
                    let d = tz
                        .data()
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((z, y), w)| s * w * (sigmoid(*z) - y))
                        .collect();
                    accumulate(&mut adj, *logits, tz.shape(), d);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let tz = self.value(*logits);
                    let classes = tz.shape()[1];
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut d = Vec::with_capacity(tz.len());
                    for (row, &label) in tz.data().chunks(classes).zip(labels) {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (c, v) in row.iter().enumerate() {
                            let p = (v - max).exp() / total;
                            d.push(scale * (p - if c == label { 1.0 } else { 0.0 }));
                        }
                    }
                    accumulate(&mut adj, *logits, tz.shape(), d);
                }
            }
        }
        Ok(())
    }

    fn accumulate_broadcast(&self, adj: &mut [Option<Tensor>], target: Var, grad: Vec<f64>) {
        let t = self.value(target);
        if t.len() == grad.len() {
            accumulate(adj, target, t.shape(), grad);
        } else {
            let total = grad.iter().sum();
            accumulate(adj, target, t.shape(), vec![total]);
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], target: Var, shape: &[usize], grad: Vec<f64>) {
    let incoming = Tensor::new(shape.to_vec(), grad).expect("gradient shape matches value");
    match &mut adj[target.0] {
        Some(existing) => existing.add_assign(&incoming),
        slot => *slot = Some(incoming),
    }
}

fn transpose_last_tensor(t: &Tensor) -> Tensor {
    let s = t.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let batch: usize = s[..r - 2].iter().product();
    let mut out = vec![0.0; t.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = t.data()[base + i * cols + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).expect("transpose preserves length")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let id = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let m = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let out = g.matmul(id, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
        let n = g.constant(Tensor::matrix(&[&[5.0, 6.0], &[7.0, 8.0]])).unwrap();
        let out = g.matmul(p, n).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        approx(g.value(s).data(), &[1.0 / 3.0; 3], 1e-15);

        let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        approx(g.value(s).data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        // exp(-1000) underflows to 0 in f64; the exact value is ~5e-435.
        approx(g.value(s).data(), &[1.0, 0.0], 1e-300);
    }

    #[test]
    fn softmax_respects_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(&[&[0.0, 1.0], &[2.0, 3.0]])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert!((v[1] + v[3] - 1.0).abs() < 1e-15);
        assert!((v[0] - v[1]).abs() < 1e-15);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn broadcasting_limited_to_scalar_or_equal_shape() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3])).unwrap();
        assert!(g.add(a, b).is_err());
        let c = g.constant(Tensor::scalar(2.0)).unwrap();
        let out = g.add(a, c).unwrap();
        assert_eq!(g.value(out).data(), &[2.0; 6]);
    }

    #[test]
    fn non_finite_results_raise() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e308])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
        assert!(g.constant(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2])).unwrap();
        let mut grads = Gradients::default();
        assert!(matches!(g.backward(x, &mut grads), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn sum_of_param_gives_ones_and_half_square_gives_value() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![0.5, -2.0, 3.0]));
        let mut g = Graph::new();
        let v = g.param(&store, p).unwrap();
        let s = g.sum(v).unwrap();
        let mut grads = Gradients::for_store(&store);
        g.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let v = g.param(&store, p).unwrap();
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        let mut grads = Gradients::for_store(&store);
        g.backward(half, &mut grads).unwrap();
        approx(grads.get(p).unwrap().data(), &[0.5, -2.0, 3.0], 1e-15);
    }

    #[test]
    fn repeated_backward_accumulates_and_constants_get_nothing() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let v = g.param(&store, p).unwrap();
        let c = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let prod = g.mul(v, c).unwrap();
        let s = g.sum(prod).unwrap();
        let mut grads = Gradients::for_store(&store);
        g.backward(s, &mut grads).unwrap();
        g.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[6.0, 8.0]);
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn gather_rows_gradient_touches_only_used_rows() {
        let mut store = ParamStore::new();
        let table = store.add("table", Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap());
        let mut g = Graph::new();
        let t = g.param(&store, table).unwrap();
        let rows = g.gather_rows(t, &[3, 1, 3]).unwrap();
        assert_eq!(g.value(rows).data(), &[6.0, 7.0, 2.0, 3.0, 6.0, 7.0]);
        let s = g.sum(rows).unwrap();
        let mut grads = Gradients::for_store(&store);
        g.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn repeat_and_concat_layouts() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let r = g.repeat(x, 1, 3).unwrap();
        assert_eq!(g.shape(r), &[2, 3, 2]);
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);

        let y = g.constant(Tensor::matrix(&[&[9.0], &[8.0]])).unwrap();
        let c = g.concat(&[x, y], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);

        let s = g.stack(&[x, x], 1).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 2]);
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn bce_matches_closed_form() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let l = g.bce_with_logits(z, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((g.value(l).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((sigmoid(-800.0)).is_finite());
    }
}
