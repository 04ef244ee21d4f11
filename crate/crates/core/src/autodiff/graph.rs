use std::collections::BTreeMap;

use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf { name: Option<String> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Concat(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    RepeatCols(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Pick(NodeId, Vec<usize>),
    ClampMin(NodeId, f64),
}

impl Op {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::RepeatCols(..) => "repeat_cols",
            Op::Gather(..) => "gather",
            Op::Pick(..) => "pick",
            Op::ClampMin(..) => "clamp_min",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(xs) => xs.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::SliceCols(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::RepeatCols(a, _)
            | Op::Gather(a, _)
            | Op::Pick(a, _)
            | Op::ClampMin(a, _) => vec![*a],
        }
    }
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Dynamic computation graph recorded eagerly.
///
/// Each op method validates shapes, computes its value immediately and
/// appends a node, so node order is a topological order by construction.
/// [`Graph::forward`] replays every op from the current leaf values.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<&'static str>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
    named: BTreeMap<String, NodeId>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<Tensor<T>> {
        self.by_node[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[id.0].clone(), g.clone()))
    }

    pub fn named(&self, name: &str) -> Option<Tensor<T>> {
        self.named.get(name).and_then(|&id| self.get(id))
    }

    /// Gradient map over every named `requires_grad` leaf. Leaves that the
    /// root does not depend on receive a zero gradient.
    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        let Gradients {
            mut by_node,
            named,
            shapes,
        } = self;
        for (name, id) in named {
            let shape = shapes[id.0].clone();
            let data = by_node[id.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); shape.iter().product()]);
            out.insert(name, Tensor::new(shape, data));
        }
        out
    }
}

fn dims(t: &Tensor<impl Real>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn matrix_shape(rows: usize, cols: usize, like_rank1: bool) -> Vec<usize> {
    if like_rank1 && rows == 1 {
        vec![cols]
    } else {
        vec![rows, cols]
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    /// Scales the backward rule of every `op` node by 1.5. Only useful for
    /// demonstrating that a gradient check catches a broken rule.
    pub fn inject_gradient_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    /// Adds a leaf. A leaf with `requires_grad` gets a gradient on backward.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let needs_grad = t.requires_grad;
        self.push(Op::Leaf { name: None }, t, needs_grad)
    }

    /// Adds a named leaf; named `requires_grad` leaves appear in
    /// [`Gradients::into_map`].
    pub fn named_leaf(&mut self, name: impl Into<String>, t: Tensor<T>) -> NodeId {
        let needs_grad = t.requires_grad;
        self.push(Op::Leaf { name: Some(name.into()) }, t, needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf { name: None }, t, false)
    }

    /// Overwrites the values of a leaf. Call [`Graph::forward`] afterwards to
    /// refresh dependent nodes.
    pub fn set_leaf(&mut self, id: NodeId, values: &[T]) {
        let node = &mut self.nodes[id.0];
        assert!(matches!(node.op, Op::Leaf { .. }), "node {} is not a leaf", id.0);
        node.value.data_mut().copy_from_slice(values);
    }

    /// Requires-grad leaves in graph order, with their names when present.
    pub fn trainable_leaves(&self) -> Vec<(NodeId, Option<String>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Leaf { name } if n.needs_grad => Some((NodeId(i), name.clone())),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<NodeId, AutodiffError> {
        let idx = self.nodes.len();
        for input in op.inputs() {
            if input.0 >= idx {
                return Err(AutodiffError::UnknownNode { node: idx, input: input.0 });
            }
        }
        self.check(&op).map_err(|detail| AutodiffError::Shape {
            node: idx,
            op: op.kind(),
            detail,
        })?;
        let value = self.eval(&op);
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push(op, value, needs_grad))
    }

    fn check(&self, op: &Op) -> Result<(), String> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf { .. } => Ok(()),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(format!("matmul needs rank-2 inputs, got {:?} x {:?}", a.shape(), b.shape()));
                }
                if a.shape()[1] != b.shape()[0] {
                    return Err(format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()));
                }
                Ok(())
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                if v(a).shape() != v(b).shape() {
                    return Err(format!("shapes differ: {:?} vs {:?}", v(a).shape(), v(b).shape()));
                }
                Ok(())
            }
            Op::AddRow(a, row) => {
                let (a, row) = (v(a), v(row));
                if row.rows() != 1 || row.cols() != a.cols() {
                    return Err(format!("bias {:?} does not fit rows of {:?}", row.shape(), a.shape()));
                }
                Ok(())
            }
            Op::Concat(xs) => {
                if xs.is_empty() {
                    return Err("concat of nothing".into());
                }
                let rows = v(&xs[0]).rows();
                for x in xs {
                    if v(x).rows() != rows {
                        return Err(format!("row counts differ: {:?} vs {:?}", v(&xs[0]).shape(), v(x).shape()));
                    }
                }
                Ok(())
            }
            Op::SliceCols(a, start, end) => {
                if start >= end || *end > v(a).cols() {
                    return Err(format!("columns {start}..{end} out of range for {:?}", v(a).shape()));
                }
                Ok(())
            }
            Op::RepeatCols(a, n) => {
                if v(a).cols() != 1 || *n == 0 {
                    return Err(format!("repeat_cols needs a single column, got {:?}", v(a).shape()));
                }
                Ok(())
            }
            Op::Gather(table, idx) => {
                let rows = v(table).rows();
                if idx.is_empty() {
                    return Err("gather with no indices".into());
                }
                if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
                    return Err(format!("row index {bad} out of range for {:?}", v(table).shape()));
                }
                Ok(())
            }
            Op::Pick(a, idx) => {
                let (rows, cols) = dims(v(a));
                if idx.len() != rows {
                    return Err(format!("{} indices for {rows} rows", idx.len()));
                }
                if let Some(bad) = idx.iter().find(|&&i| i >= cols) {
                    return Err(format!("column index {bad} out of range for {:?}", v(a).shape()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn eval(&self, op: &Op) -> Tensor<T> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let map = |id: &NodeId, f: &dyn Fn(T) -> T| {
            let x = v(id);
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&e| f(e)).collect())
        };
        let zip = |a: &NodeId, b: &NodeId, f: &dyn Fn(T, T) -> T| {
            let (x, y) = (v(a), v(b));
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.shape().to_vec(), data)
        };
        match op {
            Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![T::zero(); n * m];
                let (ad, bd) = (a.data(), b.data());
                for i in 0..n {
                    let orow = &mut out[i * m..(i + 1) * m];
                    for p in 0..k {
                        let s = ad[i * k + p];
                        if s == T::zero() {
                            continue;
                        }
                        for (o, &w) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                            *o = *o + s * w;
                        }
                    }
                }
                Tensor::new(vec![n, m], out)
            }
            Op::Add(a, b) => zip(a, b, &|p, q| p + q),
            Op::Sub(a, b) => zip(a, b, &|p, q| p - q),
            Op::Mul(a, b) => zip(a, b, &|p, q| p * q),
            Op::AddRow(a, row) => {
                let (x, r) = (v(a), v(row));
                let c = x.cols();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| e + r.data()[i % c])
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                map(a, &|e| e * c)
            }
            Op::AddScalar(a, c) => {
                let c = T::of(*c);
                map(a, &|e| e + c)
            }
            Op::Sigmoid(a) => map(a, &sigmoid),
            Op::Tanh(a) => map(a, &|e| e.tanh()),
            Op::Exp(a) => map(a, &|e| e.exp()),
            Op::Log(a) => map(a, &|e| e.ln()),
            Op::Softmax(a) => {
                let x = v(a);
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(x.cols()) {
                    softmax_in_place(row);
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::LogSoftmax(a) => {
                let x = v(a);
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(x.cols()) {
                    let lse = log_sum_exp(row);
                    row.iter_mut().for_each(|e| *e = *e - lse);
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::Concat(xs) => {
                let rows = v(&xs[0]).rows();
                let total: usize = xs.iter().map(|x| v(x).cols()).sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for x in xs {
                        out.extend_from_slice(v(x).row_slice(r));
                    }
                }
                let rank1 = xs.iter().all(|x| v(x).rank() == 1);
                Tensor::new(matrix_shape(rows, total, rank1), out)
            }
            Op::SliceCols(a, start, end) => {
                let x = v(a);
                let mut out = Vec::with_capacity(x.rows() * (end - start));
                for r in 0..x.rows() {
                    out.extend_from_slice(&x.row_slice(r)[*start..*end]);
                }
                Tensor::new(matrix_shape(x.rows(), end - start, x.rank() == 1), out)
            }
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().copied().sum()),
            Op::Mean(a) => {
                let x = v(a);
                Tensor::scalar(x.data().iter().copied().sum::<T>() / T::of(x.len() as f64))
            }
            Op::SumCols(a) => {
                let x = v(a);
                let out = (0..x.rows()).map(|r| x.row_slice(r).iter().copied().sum()).collect();
                Tensor::new(vec![x.rows(), 1], out)
            }
            Op::RepeatCols(a, n) => {
                let x = v(a);
                let out = x.data().iter().flat_map(|&e| std::iter::repeat_n(e, *n)).collect();
                Tensor::new(vec![x.rows(), *n], out)
            }
            Op::Gather(table, idx) => {
                let t = v(table);
                let mut out = Vec::with_capacity(idx.len() * t.cols());
                for &i in idx {
                    out.extend_from_slice(t.row_slice(i));
                }
                Tensor::new(vec![idx.len(), t.cols()], out)
            }
            Op::Pick(a, idx) => {
                let x = v(a);
                let out = idx.iter().enumerate().map(|(r, &c)| x.row_slice(r)[c]).collect();
                Tensor::new(vec![idx.len(), 1], out)
            }
            Op::ClampMin(a, floor) => {
                let f = T::of(*floor);
                map(a, &|e| if e > f { e } else { f })
            }
        }
    }

    /// Recomputes every non-leaf node from current leaf values and returns the
    /// value of `root`.
    pub fn forward(&mut self, root: NodeId) -> Result<&Tensor<T>, AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyGraph);
        }
        for i in 0..=root.0 {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.eval(&op);
        }
        Ok(&self.nodes[root.0].value)
    }

    /// Reverse sweep from a scalar root. Fan-out contributions accumulate.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>, AutodiffError> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                grads[i] = Some(g);
                continue;
            }
            let fault = self.fault == Some(node.op.kind());
            for (input, contrib) in self.vjp(node, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                let contrib = if fault {
                    contrib.into_iter().map(|e| e * T::of(1.5)).collect()
                } else {
                    contrib
                };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut named = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if node.needs_grad {
                    named.insert(name.clone(), NodeId(i));
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            by_node: grads,
            named,
            shapes,
        })
    }

    /// Vector-Jacobian products of one node with respect to each input.
    fn vjp(&self, node: &Node<T>, g: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let y = node.value.data();
        let elementwise = |a: &NodeId, f: &dyn Fn(usize) -> T| -> Vec<(NodeId, Vec<T>)> {
            vec![(*a, (0..g.len()).map(|i| g[i] * f(i)).collect())]
        };
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let (ad, bd) = (av.data(), bv.data());
                let mut out = Vec::new();
                if self.nodes[a.0].needs_grad {
                    // dA = G B^T
                    let mut da = vec![T::zero(); n * k];
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            da[i * k + p] = gi.iter().zip(brow).map(|(&x, &w)| x * w).sum();
                        }
                    }
                    out.push((*a, da));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T G
                    let mut db = vec![T::zero(); k * m];
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let s = ad[i * k + p];
                            if s == T::zero() {
                                continue;
                            }
                            for (d, &x) in db[p * m..(p + 1) * m].iter_mut().zip(gi) {
                                *d = *d + s * x;
                            }
                        }
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&e| -e).collect())],
            Op::Mul(a, b) => {
                let (ad, bd) = (v(a).data(), v(b).data());
                vec![
                    (*a, g.iter().zip(bd).map(|(&x, &w)| x * w).collect()),
                    (*b, g.iter().zip(ad).map(|(&x, &w)| x * w).collect()),
                ]
            }
            Op::AddRow(a, row) => {
                let c = v(a).cols();
                let mut dr = vec![T::zero(); c];
                for chunk in g.chunks(c) {
                    dr.iter_mut().zip(chunk).for_each(|(d, &x)| *d = *d + x);
                }
                vec![(*a, g.to_vec()), (*row, dr)]
            }
            Op::Scale(a, c) => {
                let c = T::of(*c);
                elementwise(a, &|_| c)
            }
            Op::AddScalar(a, _) => vec![(*a, g.to_vec())],
            Op::Sigmoid(a) => elementwise(a, &|i| y[i] * (T::one() - y[i])),
            Op::Tanh(a) => elementwise(a, &|i| T::one() - y[i] * y[i]),
            Op::Exp(a) => elementwise(a, &|i| y[i]),
            Op::Log(a) => {
                let x = v(a).data();
                elementwise(a, &|i| x[i].recip())
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                vec![(*a, dx)]
            }
            Op::Concat(xs) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut out = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for x in xs {
                    let c = v(x).cols();
                    let mut dx = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dx.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    out.push((*x, dx));
                }
                out
            }
            Op::SliceCols(a, start, end) => {
                let x = v(a);
                let (c, w) = (x.cols(), end - start);
                let mut dx = vec![T::zero(); x.len()];
                for r in 0..x.rows() {
                    dx[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![(*a, dx)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; v(a).len()])],
            Op::Mean(a) => {
                let n = v(a).len();
                vec![(*a, vec![g[0] / T::of(n as f64); n])]
            }
            Op::SumCols(a) => {
                let c = v(a).cols();
                vec![(*a, g.iter().flat_map(|&e| std::iter::repeat_n(e, c)).collect())]
            }
            Op::RepeatCols(a, n) => vec![(*a, g.chunks(*n).map(|ch| ch.iter().copied().sum()).collect())],
            Op::Gather(table, idx) => {
                let t = v(table);
                let c = t.cols();
                let mut dt = vec![T::zero(); t.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &x) in dt[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d = *d + x;
                    }
                }
                vec![(*table, dt)]
            }
            Op::Pick(a, idx) => {
                let x = v(a);
                let c = x.cols();
                let mut dx = vec![T::zero(); x.len()];
                for (r, &j) in idx.iter().enumerate() {
                    dx[r * c + j] = g[r];
                }
                vec![(*a, dx)]
            }
            Op::ClampMin(a, floor) => {
                let x = v(a).data();
                let f = T::of(*floor);
                elementwise(a, &|i| if x[i] > f { T::one() } else { T::zero() })
            }
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Mul(a, b))
    }

    /// Matrix plus a row vector broadcast over rows (the only broadcast).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.record(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.record(Op::AddScalar(a, c))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Log(a))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Softmax(a))
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::LogSoftmax(a))
    }

    /// Concatenation along the last dimension.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        self.record(Op::Concat(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, AutodiffError> {
        self.record(Op::SliceCols(a, start, end))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::Mean(a))
    }

    /// Per-row sum, producing a `[rows, 1]` column.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.record(Op::SumCols(a))
    }

    /// Copies a `[rows, 1]` column into `n` columns.
    pub fn repeat_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId, AutodiffError> {
        self.record(Op::RepeatCols(a, n))
    }

    /// Row lookup; this is the embedding lookup primitive.
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId, AutodiffError> {
        self.record(Op::Gather(table, rows.to_vec()))
    }

    /// Selects one column per row, producing a `[rows, 1]` column.
    pub fn pick(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId, AutodiffError> {
        self.record(Op::Pick(a, cols.to_vec()))
    }

    /// `max(floor, x)` elementwise; the subgradient at the kink is 0.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId, AutodiffError> {
        self.record(Op::ClampMin(a, floor))
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&e| (e - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        s = s + *e;
    }
    row.iter_mut().for_each(|e| *e = *e / s);
}
