//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and backward is a single reverse sweep.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Tanh(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    WeightedSum(NodeId, Vec<f64>),
    Gather { table: NodeId, ids: Vec<Option<usize>> },
    ConcatCols(NodeId, NodeId),
    Reshape(NodeId),
    SoftmaxTemp(NodeId, f64),
    LogSoftmaxTemp(NodeId, f64),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxTemp(..) => "softmax_temp",
            Op::LogSoftmaxTemp(..) => "log_softmax_temp",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
///
/// Only nodes that require a gradient and are reachable from the root
/// carry an entry.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector `[n]` to every row of `x` (`[...×n]`).
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.value(x).last_dim();
        if self.value(bias).numel() != n {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), value, rg))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(op, value, rg))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Sum(x), Tensor::scalar(s), rg))
    }

    /// `Σ w ⊙ x` for a constant weight array of the same size as `x`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(v, w)| v * w)
            .sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::WeightedSum(x, weights), Tensor::scalar(s), rg))
    }

    /// Row lookup into a `[V×d]` table.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ids: Vec<Option<usize>> = ids.iter().copied().map(Some).collect();
        self.gather_masked(table, &ids)
    }

    /// Row lookup where `None` produces a zero row.
    pub fn gather_masked(&mut self, table: NodeId, ids: &[Option<usize>]) -> Result<NodeId> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        if ids.is_empty() {
            return Err(Error::contract("gather with empty id list"));
        }
        let (rows, d) = (shape[0], shape[1]);
        let t = self.value(table);
        let mut data = vec![0.0; ids.len() * d];
        for (i, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= rows {
                    return Err(Error::Index {
                        op: "gather",
                        index: id,
                        bound: rows,
                    });
                }
                data[i * d..(i + 1) * d].copy_from_slice(t.row(id));
            }
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// `[m×a] ++ [m×b] -> [m×(a+b)]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, ca, cb) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (ca + cb));
        for r in 0..m {
            data.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![m, ca + cb], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::ConcatCols(a, b), value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Softmax of `x / temperature` over the last dimension.
    pub fn softmax_temp(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        check_temperature(temperature)?;
        let value = softmax_rows(self.value(x), temperature);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::SoftmaxTemp(x, temperature), value, rg))
    }

    /// Log-softmax of `x / temperature` over the last dimension.
    pub fn log_softmax_temp(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        check_temperature(temperature)?;
        let value = log_softmax_rows(self.value(x), temperature);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::LogSoftmaxTemp(x, temperature), value, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            // Leaf gradients are the result; intermediates are dropped.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(contribution)
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: NodeId,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    let bd = vb.data();
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &bd[p * n..(p + 1) * n];
                            da[i * k + p] = gi.iter().zip(bp).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.requires_grad(b) {
                    // dB = Aᵀ · G
                    let ad = va.data();
                    self.accumulate_with(grads, b, |db| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let row = &mut db[p * n..(p + 1) * n];
                                row.iter_mut().zip(gi).for_each(|(d, x)| *d += aip * x);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                self.accumulate(grads, b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, x, g.to_vec());
                let n = self.value(bias).numel();
                self.accumulate_with(grads, bias, |db| {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Tanh(x) => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::Square(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gv, v)| 2.0 * v * gv)
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, x, g.iter().map(|v| v * c).collect());
            }
            Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            Op::WeightedSum(x, ref w) => {
                self.accumulate(grads, x, w.iter().map(|wv| wv * g[0]).collect());
            }
            Op::Gather { table, ref ids } => {
                let d = self.value(table).last_dim();
                self.accumulate_with(grads, table, |dt| {
                    for (i, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            let src = &g[i * d..(i + 1) * d];
                            dt[id * d..(id + 1) * d]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(t, s)| *t += s);
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(a).last_dim(), self.value(b).last_dim());
                let m = out.shape()[0];
                let w = ca + cb;
                if self.requires_grad(a) {
                    let da = (0..m)
                        .flat_map(|r| g[r * w..r * w + ca].iter().copied())
                        .collect();
                    self.accumulate(grads, a, da);
                }
                if self.requires_grad(b) {
                    let db = (0..m)
                        .flat_map(|r| g[r * w + ca..(r + 1) * w].iter().copied())
                        .collect();
                    self.accumulate(grads, b, db);
                }
            }
            Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            Op::SoftmaxTemp(x, t) => {
                let k = out.last_dim();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (gv - dot) / t;
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LogSoftmaxTemp(x, t) => {
                let k = out.last_dim();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k)) {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, gv), ly) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = (gv - ly.exp() * gsum) / t;
                    }
                }
                self.accumulate(grads, x, dx);
            }
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

/// Row-major `[m×k]·[k×n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

/// Temperature softmax over the last dimension, with max subtraction.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let k = x.last_dim();
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let start = data.len();
        let mut total = 0.0;
        for &v in row {
            let e = ((v - max) / temperature).exp();
            total += e;
            data.push(e);
        }
        data[start..].iter_mut().for_each(|e| *e /= total);
    }
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Temperature log-softmax over the last dimension.
pub fn log_softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let k = x.last_dim();
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row
            .iter()
            .map(|&v| ((v - max) / temperature).exp())
            .sum::<f64>()
            .ln();
        data.extend(row.iter().map(|&v| (v - max) / temperature - lse));
    }
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}
