//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Nodes are appended to an arena in creation order, so node ids are a
//! topological order. Every vector-Jacobian product is itself expressed with
//! graph operations: a backward pass run with `retain = true` leaves its
//! gradients in the graph as ordinary differentiable nodes, which is what makes
//! backward-on-backward (second order) work. With `retain = false` the same
//! nodes are built, their values read out, and the arena truncated back, so
//! both modes produce bit-identical gradient values.

mod matrix;

pub use matrix::Matrix;

use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be 1x1, got {0:?}")]
    RootNotScalar((usize, usize)),
    #[error("target node {0} is not reachable from the root")]
    Unreachable(usize),
    #[error("target node {0} does not require grad")]
    NotDifferentiable(usize),
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Powf(NodeId, f64),
    ClampMin(NodeId, f64),
    Softmax(NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    BroadcastScalar(NodeId),
    BroadcastRows(NodeId),
    BroadcastCols(NodeId),
    GatherRows(NodeId, Rc<[usize]>),
    ScatterRows(NodeId, Rc<[usize]>),
}

impl Op {
    fn inputs(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Scale(a, _)
            | AddScalar(a)
            | Transpose(a)
            | Relu(a)
            | Exp(a)
            | Ln(a)
            | Powf(a, _)
            | ClampMin(a, _)
            | Softmax(a)
            | Sum(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastScalar(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | GatherRows(a, _)
            | ScatterRows(a, _) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients returned by [`Graph::backward`], in target order.
#[derive(Debug, Clone)]
pub struct Gradients {
    values: Vec<Matrix>,
    nodes: Option<Vec<NodeId>>,
}

impl Gradients {
    pub fn value(&self, i: usize) -> &Matrix {
        &self.values[i]
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Matrix> {
        self.values
    }

    /// Differentiable gradient node; `None` unless the backward pass retained
    /// its graph.
    pub fn node(&self, i: usize) -> Option<NodeId> {
        self.nodes.as_ref().map(|n| n[i])
    }

    pub fn nodes(&self) -> Option<&[NodeId]> {
        self.nodes.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    /// Number of live nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of stored scalars across live nodes.
    pub fn element_count(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: "leaf" });
        }
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Result<NodeId> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push_raw(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: name });
        }
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = self.value(a).matmul(self.value(b));
        self.push("matmul", v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.push("transpose", v, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a))
    }

    /// Natural log; non-positive inputs fail the finiteness check.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push("ln", v, Op::Ln(a))
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.powf(p));
        self.push("powf", v, Op::Powf(a, p))
    }

    /// `max(a, lo)` elementwise; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > lo { x } else { lo });
        self.push("clamp_min", v, Op::ClampMin(a, lo))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut total = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = (xi - max).exp();
                total += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= total;
            }
        }
        self.push("softmax", out, Op::Softmax(a))
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Matrix::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a))
    }

    /// Column sums: `m×n → 1×n`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        self.push("sum_rows", out, Op::SumRows(a))
    }

    /// Row sums: `m×n → m×1`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let v = Matrix::column((0..x.rows()).map(|r| x.row(r).iter().sum()).collect());
        self.push("sum_cols", v, Op::SumCols(a))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if self.shape(a) != (1, 1) {
            return Err(GraphError::ShapeMismatch {
                op: "broadcast_scalar",
                lhs: self.shape(a),
                rhs: (1, 1),
            });
        }
        let v = Matrix::filled(rows, cols, self.value(a).item());
        self.push("broadcast_scalar", v, Op::BroadcastScalar(a))
    }

    /// Repeat a `1×n` row `m` times.
    pub fn broadcast_rows(&mut self, a: NodeId, m: usize) -> Result<NodeId> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(GraphError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: x.shape(),
                rhs: (1, x.cols()),
            });
        }
        let mut data = Vec::with_capacity(m * x.cols());
        for _ in 0..m {
            data.extend_from_slice(x.as_slice());
        }
        let v = Matrix::from_vec(m, x.cols(), data);
        self.push("broadcast_rows", v, Op::BroadcastRows(a))
    }

    /// Repeat an `m×1` column `n` times.
    pub fn broadcast_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let x = self.value(a);
        if x.cols() != 1 {
            return Err(GraphError::ShapeMismatch {
                op: "broadcast_cols",
                lhs: x.shape(),
                rhs: (x.rows(), 1),
            });
        }
        let mut data = Vec::with_capacity(x.rows() * n);
        for &v in x.as_slice() {
            data.extend(std::iter::repeat_n(v, n));
        }
        let v = Matrix::from_vec(x.rows(), n, data);
        self.push("broadcast_cols", v, Op::BroadcastCols(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(GraphError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} out of range for {} rows", x.rows()),
            });
        }
        let v = x.select_rows(idx);
        self.push("gather_rows", v, Op::GatherRows(a, idx.into()))
    }

    /// Inverse of [`Graph::gather_rows`]: row `k` of `a` is added into row
    /// `idx[k]` of an `m`-row zero matrix.
    pub fn scatter_rows(&mut self, a: NodeId, idx: &[usize], m: usize) -> Result<NodeId> {
        let x = self.value(a);
        if idx.len() != x.rows() || idx.iter().any(|&i| i >= m) {
            return Err(GraphError::InvalidArgument {
                op: "scatter_rows",
                reason: format!("{} indices for {} rows into {m}", idx.len(), x.rows()),
            });
        }
        let mut out = Matrix::zeros(m, x.cols());
        for (k, &i) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        self.push("scatter_rows", out, Op::ScatterRows(a, idx.into()))
    }

    // ---- composites ----

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.shape(a).0;
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / m as f64)
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let b = self.broadcast_rows(row, self.shape(a).0)?;
        self.add(a, b)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let b = self.broadcast_rows(row, self.shape(a).0)?;
        self.mul(a, b)
    }

    /// Multiply by a fixed mask drawn from `rng`: entries are zeroed with
    /// probability `rate` and survivors scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GraphError::InvalidArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 / (1.0 - rate);
        let mask = Matrix::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect(),
        );
        let m = self.constant(mask)?;
        self.mul(a, m)
    }

    /// Training-mode batch normalization over rows (population variance).
    /// `gamma`/`beta` are optional `1×n` affine rows.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        eps: f64,
    ) -> Result<NodeId> {
        let m = self.shape(x).0;
        let mu = self.mean_rows(x)?;
        let mu_b = self.broadcast_rows(mu, m)?;
        let centered = self.sub(x, mu_b)?;
        let sq = self.mul(centered, centered)?;
        let var = self.mean_rows(sq)?;
        let var_eps = self.add_scalar(var, eps)?;
        let inv_std = self.powf(var_eps, -0.5)?;
        let mut out = self.mul_row(centered, inv_std)?;
        if let Some(g) = gamma {
            out = self.mul_row(out, g)?;
        }
        if let Some(b) = beta {
            out = self.add_row(out, b)?;
        }
        Ok(out)
    }

    // ---- differentiation ----

    /// Gradients of the scalar `root` with respect to each of `targets`.
    ///
    /// With `retain` the gradients stay in the graph and can be differentiated
    /// again; otherwise the nodes created by this call are dropped after their
    /// values are read.
    pub fn backward(&mut self, root: NodeId, targets: &[NodeId], retain: bool) -> Result<Gradients> {
        let mark = self.nodes.len();
        let result = self.backward_nodes(root, targets);
        let nodes = match result {
            Ok(n) => n,
            Err(e) => {
                self.nodes.truncate(mark);
                return Err(e);
            }
        };
        let values = nodes.iter().map(|&n| self.value(n).clone()).collect();
        if retain {
            Ok(Gradients {
                values,
                nodes: Some(nodes),
            })
        } else {
            self.nodes.truncate(mark);
            Ok(Gradients {
                values,
                nodes: None,
            })
        }
    }

    /// As [`backward`](Self::backward), but a target the root does not depend
    /// on gets a zero gradient (a zero constant node when retained).
    pub fn backward_or_zero(&mut self, root: NodeId, targets: &[NodeId], retain: bool) -> Result<Gradients> {
        let live = self.ancestors(root);
        let reachable: Vec<NodeId> = targets.iter().copied().filter(|t| live.get(t.0) == Some(&true)).collect();
        let mark = self.nodes.len();
        let partial = if reachable.is_empty() {
            let shape = self.shape(root);
            if shape != (1, 1) {
                return Err(GraphError::RootNotScalar(shape));
            }
            Gradients {
                values: Vec::new(),
                nodes: retain.then(Vec::new),
            }
        } else {
            self.backward(root, &reachable, retain)?
        };
        let mut values = Vec::with_capacity(targets.len());
        let mut nodes = retain.then(|| Vec::with_capacity(targets.len()));
        let mut k = 0;
        for &t in targets {
            if live.get(t.0) == Some(&true) {
                values.push(partial.values[k].clone());
                if let (Some(out), Some(src)) = (nodes.as_mut(), partial.nodes.as_ref()) {
                    out.push(src[k]);
                }
                k += 1;
            } else {
                if !self.nodes[t.0].requires_grad {
                    self.nodes.truncate(mark);
                    return Err(GraphError::NotDifferentiable(t.0));
                }
                let (r, c) = self.shape(t);
                values.push(Matrix::zeros(r, c));
                if let Some(out) = nodes.as_mut() {
                    out.push(self.constant(Matrix::zeros(r, c))?);
                }
            }
        }
        Ok(Gradients { values, nodes })
    }

    /// `out[i]` is true when `root` depends on node `i`.
    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut live = vec![false; root.0 + 1];
        live[root.0] = true;
        for i in (0..=root.0).rev() {
            if live[i] {
                for p in self.nodes[i].op.inputs().iter().flatten() {
                    live[p.0] = true;
                }
            }
        }
        live
    }

    fn backward_nodes(&mut self, root: NodeId, targets: &[NodeId]) -> Result<Vec<NodeId>> {
        let root_shape = self.shape(root);
        if root_shape != (1, 1) {
            return Err(GraphError::RootNotScalar(root_shape));
        }
        for &t in targets {
            if !self.nodes[t.0].requires_grad {
                return Err(GraphError::NotDifferentiable(t.0));
            }
        }

        let n = root.0 + 1;
        // reaches[i]: some target lies in the subgraph below node i
        let mut reaches = vec![false; n];
        for &t in targets {
            if t.0 < n {
                reaches[t.0] = true;
            }
        }
        for i in 0..n {
            if !reaches[i] {
                reaches[i] = self.nodes[i].op.inputs().iter().flatten().any(|p| reaches[p.0]);
            }
        }
        if let Some(t) = targets.iter().find(|t| t.0 >= n || !reaches[t.0]) {
            return Err(GraphError::Unreachable(t.0));
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        grads[root.0] = Some(self.constant(Matrix::scalar(1.0))?);

        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !reaches[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let node = NodeId(i);
            let contributions = self.vjp(node, &op, g, &reaches)?;
            for (input, c) in contributions {
                grads[input.0] = Some(match grads[input.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        targets
            .iter()
            .map(|t| grads[t.0].ok_or(GraphError::Unreachable(t.0)))
            .collect()
    }

    /// Vector-Jacobian products of `node` (computed by `op`) given upstream
    /// gradient `g`, for inputs that lead to a target.
    fn vjp(
        &mut self,
        node: NodeId,
        op: &Op,
        g: NodeId,
        reaches: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let wants = |id: NodeId| reaches[id.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    out.push((*a, g));
                }
                if wants(*b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    out.push((*a, g));
                }
                if wants(*b) {
                    out.push((*b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if wants(*b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    out.push((*a, self.scale(g, *c)?));
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    out.push((*a, g));
                }
            }
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let bt = self.transpose(*b)?;
                    out.push((*a, self.matmul(g, bt)?));
                }
                if wants(*b) {
                    let at = self.transpose(*a)?;
                    out.push((*b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    out.push((*a, self.transpose(g)?));
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let mask = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let m = self.constant(mask)?;
                    out.push((*a, self.mul(g, m)?));
                }
            }
            Op::ClampMin(a, lo) => {
                if wants(*a) {
                    let lo = *lo;
                    let mask = self.value(*a).map(|x| if x > lo { 1.0 } else { 0.0 });
                    let m = self.constant(mask)?;
                    out.push((*a, self.mul(g, m)?));
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    out.push((*a, self.mul(g, node)?));
                }
            }
            Op::Ln(a) => {
                if wants(*a) {
                    let inv = self.powf(*a, -1.0)?;
                    out.push((*a, self.mul(g, inv)?));
                }
            }
            Op::Powf(a, p) => {
                if wants(*a) {
                    let p = *p;
                    let d = if p == 2.0 {
                        self.scale(*a, 2.0)?
                    } else {
                        let q = self.powf(*a, p - 1.0)?;
                        self.scale(q, p)?
                    };
                    out.push((*a, self.mul(g, d)?));
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    // s * (g - rowsum(g * s))
                    let n = self.shape(node).1;
                    let gs = self.mul(g, node)?;
                    let rs = self.sum_cols(gs)?;
                    let rb = self.broadcast_cols(rs, n)?;
                    let diff = self.sub(g, rb)?;
                    out.push((*a, self.mul(node, diff)?));
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let (r, c) = self.shape(*a);
                    out.push((*a, self.broadcast_scalar(g, r, c)?));
                }
            }
            Op::SumRows(a) => {
                if wants(*a) {
                    let m = self.shape(*a).0;
                    out.push((*a, self.broadcast_rows(g, m)?));
                }
            }
            Op::SumCols(a) => {
                if wants(*a) {
                    let n = self.shape(*a).1;
                    out.push((*a, self.broadcast_cols(g, n)?));
                }
            }
            Op::BroadcastScalar(a) => {
                if wants(*a) {
                    out.push((*a, self.sum(g)?));
                }
            }
            Op::BroadcastRows(a) => {
                if wants(*a) {
                    out.push((*a, self.sum_rows(g)?));
                }
            }
            Op::BroadcastCols(a) => {
                if wants(*a) {
                    out.push((*a, self.sum_cols(g)?));
                }
            }
            Op::GatherRows(a, idx) => {
                if wants(*a) {
                    let m = self.shape(*a).0;
                    let idx = idx.clone();
                    out.push((*a, self.scatter_rows(g, &idx, m)?));
                }
            }
            Op::ScatterRows(a, idx) => {
                if wants(*a) {
                    let idx = idx.clone();
                    out.push((*a, self.gather_rows(g, &idx)?));
                }
            }
        }
        Ok(out)
    }
}
