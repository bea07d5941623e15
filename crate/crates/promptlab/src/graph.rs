//! Eager reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] is built fresh for every forward pass and dropped after
//! `backward`; nodes hold their value eagerly so domain preconditions are
//! checked at construction time. Single-threaded by design: one graph per
//! training step, never shared mutably.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Identifier of a node in the active computation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// The primitive operations the graph records. Each entry corresponds to
/// one differentiable kernel with a fixed shape rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Matmul,
    Add,
    Sub,
    MulElementwise,
    ScaleByConstant(f64),
    Exp,
    Log,
    Tanh,
    Relu,
    Sum,
    Mean,
    L2NormalizeRows,
    SoftmaxLastDim,
    Transpose,
    ConcatRows,
    SliceRows { start: usize, end: usize },
    OuterProduct,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    L2NormalizeRows(NodeId),
    SoftmaxLastDim(NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize, end: usize },
    OuterProduct(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients of a scalar loss with respect to every reachable
/// `requires_grad` leaf, keyed by the leaf's node id. Gradient shapes
/// equal the corresponding parameter shapes.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }
}

/// Reverse-mode tape. Build leaves, compose primitives, call
/// [`Graph::backward`] from a scalar loss, then drop the graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf holding `value`. Parameters are leaves with
    /// `requires_grad = true`; data and frozen weights use `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::domain("leaf tensor contains non-finite values"));
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::domain("primitive produced a non-finite value"));
        }
        Ok(self.push(value, requires_grad, op))
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Uniform dispatch over the primitive set; convenience methods below
    /// call straight into the same kernels.
    pub fn apply_primitive(&mut self, prim: Primitive, operands: &[NodeId]) -> Result<NodeId> {
        let unary = |ops: &[NodeId]| -> Result<NodeId> {
            if ops.len() != 1 {
                return Err(Error::shape(format!("expected 1 operand, got {}", ops.len())));
            }
            Ok(ops[0])
        };
        let binary = |ops: &[NodeId]| -> Result<(NodeId, NodeId)> {
            if ops.len() != 2 {
                return Err(Error::shape(format!("expected 2 operands, got {}", ops.len())));
            }
            Ok((ops[0], ops[1]))
        };
        match prim {
            Primitive::Matmul => {
                let (a, b) = binary(operands)?;
                self.matmul(a, b)
            }
            Primitive::Add => {
                let (a, b) = binary(operands)?;
                self.add(a, b)
            }
            Primitive::Sub => {
                let (a, b) = binary(operands)?;
                self.sub(a, b)
            }
            Primitive::MulElementwise => {
                let (a, b) = binary(operands)?;
                self.mul(a, b)
            }
            Primitive::ScaleByConstant(c) => self.scale(unary(operands)?, c),
            Primitive::Exp => self.exp(unary(operands)?),
            Primitive::Log => self.log(unary(operands)?),
            Primitive::Tanh => self.tanh(unary(operands)?),
            Primitive::Relu => self.relu(unary(operands)?),
            Primitive::Sum => self.sum(unary(operands)?),
            Primitive::Mean => self.mean(unary(operands)?),
            Primitive::L2NormalizeRows => self.l2_normalize_rows(unary(operands)?),
            Primitive::SoftmaxLastDim => self.softmax_lastdim(unary(operands)?),
            Primitive::Transpose => self.transpose(unary(operands)?),
            Primitive::ConcatRows => self.concat_rows(operands),
            Primitive::SliceRows { start, end } => self.slice_rows(unary(operands)?, start, end),
            Primitive::OuterProduct => {
                let (a, b) = binary(operands)?;
                self.outer_product(a, b)
            }
        }
    }

    /// Matrix product. Supported shape rules: `[m,k]·[k,n] -> [m,n]`,
    /// `[m,k]·[k] -> [m]`, and `[k]·[k,n] -> [n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = match (va.rank(), vb.rank()) {
            (2, 2) => {
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let (k2, n) = (vb.shape()[0], vb.shape()[1]);
                if k != k2 {
                    return Err(Error::shape(format!(
                        "matmul inner dims differ: {k} vs {k2}"
                    )));
                }
                Tensor::matrix(m, n, tensor::matmul_mm(va.data(), vb.data(), m, k, n))?
            }
            (2, 1) => {
                let (m, k) = (va.shape()[0], va.shape()[1]);
                if vb.shape()[0] != k {
                    return Err(Error::shape(format!(
                        "matvec dims differ: {} vs {}",
                        k,
                        vb.shape()[0]
                    )));
                }
                Tensor::vector(tensor::matmul_mv(va.data(), vb.data(), m, k))
            }
            (1, 2) => {
                let k = va.shape()[0];
                let (k2, n) = (vb.shape()[0], vb.shape()[1]);
                if k != k2 {
                    return Err(Error::shape(format!(
                        "vecmat dims differ: {k} vs {k2}"
                    )));
                }
                Tensor::vector(tensor::matmul_vm(va.data(), vb.data(), k, n))
            }
            (ra, rb) => {
                return Err(Error::shape(format!(
                    "matmul requires rank-1/2 operands, got ranks {ra} and {rb}"
                )))
            }
        };
        let rg = self.any_grad(&[a, b]);
        self.push_checked(out, rg, Op::Matmul(a, b))
    }

    fn elementwise_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "elementwise operands differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_shape_vec(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push_checked(out, rg, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn elementwise_unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_shape_vec(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        self.push_checked(out, rg, op)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::domain("scale constant must be finite"));
        }
        self.elementwise_unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise_unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural logarithm; every input entry must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("log requires strictly positive inputs"));
        }
        self.elementwise_unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise_unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.elementwise_unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push_checked(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let s: f64 = va.data().iter().sum::<f64>() / va.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push_checked(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Scales each row (a 1-D tensor counts as one row) to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 1 && va.rank() != 2 {
            return Err(Error::shape("l2_normalize_rows requires rank 1 or 2"));
        }
        let cols = va.cols();
        let mut data = va.data().to_vec();
        for r in 0..va.rows() {
            tensor::l2_normalize_in_place(&mut data[r * cols..(r + 1) * cols])?;
        }
        let out = Tensor::from_shape_vec(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        self.push_checked(out, rg, Op::L2NormalizeRows(a))
    }

    /// Softmax over the last dimension (each row of a matrix, or the whole
    /// vector). Stable under large logits via max subtraction.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 1 && va.rank() != 2 {
            return Err(Error::shape("softmax_lastdim requires rank 1 or 2"));
        }
        let cols = va.cols();
        let mut data = Vec::with_capacity(va.numel());
        for r in 0..va.rows() {
            data.extend(tensor::softmax_row(&va.data()[r * cols..(r + 1) * cols]));
        }
        let out = Tensor::from_shape_vec(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        self.push_checked(out, rg, Op::SoftmaxLastDim(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("transpose requires a rank-2 tensor"));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data()[i * n + j];
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        let rg = self.any_grad(&[a]);
        self.push_checked(out, rg, Op::Transpose(a))
    }

    /// Stacks operands as rows; 1-D operands contribute a single row.
    /// All operands must share the column count.
    pub fn concat_rows(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::shape("concat_rows requires at least one operand"));
        }
        let cols = self.value(ids[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &id in ids {
            let v = self.value(id);
            if v.rank() != 1 && v.rank() != 2 {
                return Err(Error::shape("concat_rows operands must be rank 1 or 2"));
            }
            if v.cols() != cols {
                return Err(Error::shape(format!(
                    "concat_rows column mismatch: {} vs {}",
                    v.cols(),
                    cols
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = self.any_grad(ids);
        self.push_checked(out, rg, Op::ConcatRows(ids.to_vec()))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape("slice_rows requires a rank-2 tensor"));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        if start >= end || end > m {
            return Err(Error::shape(format!(
                "slice_rows range {start}..{end} out of bounds for {m} rows"
            )));
        }
        let out = Tensor::matrix(end - start, n, va.data()[start * n..end * n].to_vec())?;
        let rg = self.any_grad(&[a]);
        self.push_checked(out, rg, Op::SliceRows { input: a, start, end })
    }

    /// `outer_product(u[m], v[n]) -> [m,n]` with entries `u_i·v_j`.
    pub fn outer_product(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 1 || vb.rank() != 1 {
            return Err(Error::shape("outer_product requires two rank-1 tensors"));
        }
        let (m, n) = (va.shape()[0], vb.shape()[0]);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(va.data()[i] * vb.data()[j]);
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let rg = self.any_grad(&[a, b]);
        self.push_checked(out, rg, Op::OuterProduct(a, b))
    }

    /// Exact reverse-mode gradients of a scalar `loss` with respect to all
    /// reachable `requires_grad` leaves.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if !loss_node.requires_grad {
            return Err(Error::graph(
                "loss is detached: no requires_grad parameter reaches it",
            ));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_shape_vec(
            loss_node.value.shape().to_vec(),
            vec![1.0],
        )?);

        let mut map = GradientMap::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    map.grads.insert(NodeId(id), g);
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(map)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (d, s) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *d += s;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, op: &Op, out_value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                match (va.rank(), vb.rank()) {
                    (2, 2) => {
                        let (m, k) = (va.shape()[0], va.shape()[1]);
                        let n = vb.shape()[1];
                        // dA = g·Bᵀ ; dB = Aᵀ·g
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g.data()[i * n + j] * vb.data()[p * n + j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                        let mut db = vec![0.0; k * n];
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += va.data()[i * k + p] * g.data()[i * n + j];
                                }
                                db[p * n + j] = s;
                            }
                        }
                        self.accumulate(grads, *a, Tensor::matrix(m, k, da).unwrap());
                        self.accumulate(grads, *b, Tensor::matrix(k, n, db).unwrap());
                    }
                    (2, 1) => {
                        let (m, k) = (va.shape()[0], va.shape()[1]);
                        // y = A·x: dA = g⊗x ; dx = Aᵀ·g
                        let mut da = Vec::with_capacity(m * k);
                        for i in 0..m {
                            for p in 0..k {
                                da.push(g.data()[i] * vb.data()[p]);
                            }
                        }
                        let dx = tensor::matmul_vm(g.data(), va.data(), m, k);
                        self.accumulate(grads, *a, Tensor::matrix(m, k, da).unwrap());
                        self.accumulate(grads, *b, Tensor::vector(dx));
                    }
                    (1, 2) => {
                        let (k, n) = (vb.shape()[0], vb.shape()[1]);
                        // y = x·B: dx = B·g ; dB = x⊗g
                        let dx = tensor::matmul_mv(vb.data(), g.data(), k, n);
                        let mut db = Vec::with_capacity(k * n);
                        for p in 0..k {
                            for j in 0..n {
                                db.push(va.data()[p] * g.data()[j]);
                            }
                        }
                        self.accumulate(grads, *a, Tensor::vector(dx));
                        self.accumulate(grads, *b, Tensor::matrix(k, n, db).unwrap());
                    }
                    _ => unreachable!("matmul shapes were validated at construction"),
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg: Vec<f64> = g.data().iter().map(|&x| -x).collect();
                self.accumulate(
                    grads,
                    *b,
                    Tensor::from_shape_vec(g.shape().to_vec(), neg).unwrap(),
                );
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.data().iter().zip(vb.data()).map(|(&gv, &y)| gv * y).collect();
                let db: Vec<f64> = g.data().iter().zip(va.data()).map(|(&gv, &x)| gv * x).collect();
                self.accumulate(grads, *a, Tensor::from_shape_vec(g.shape().to_vec(), da).unwrap());
                self.accumulate(grads, *b, Tensor::from_shape_vec(g.shape().to_vec(), db).unwrap());
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.data().iter().map(|&gv| c * gv).collect();
                self.accumulate(grads, *a, Tensor::from_shape_vec(g.shape().to_vec(), da).unwrap());
            }
            Op::Exp(a) => {
                // out = exp(x) saved in out_value
                let da: Vec<f64> =
                    g.data().iter().zip(out_value.data()).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, *a, Tensor::from_shape_vec(g.shape().to_vec(), da).unwrap());
            }
            Op::Log(a) => {
                let va = self.value(*a);
                let da: Vec<f64> =
                    g.data().iter().zip(va.data()).map(|(&gv, &x)| gv / x).collect();
                self.accumulate(grads, *a, Tensor::from_shape_vec(g.shape().to_vec(), da).unwrap());
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out_value.data())
                    .map(|(&gv, &y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_shape_vec(g.shape().to_vec(), da).unwrap());
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_shape_vec(g.shape().to_vec(), da).unwrap());
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                let gv = g.scalar_value();
                self.accumulate(grads, *a, Tensor::full(va.shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let gv = g.scalar_value() / va.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(va.shape().to_vec(), gv));
            }
            Op::L2NormalizeRows(a) => {
                // Per row: y = x/‖x‖, dx = (g − (g·y)·y)/‖x‖.
                let va = self.value(*a);
                let cols = va.cols();
                let mut da = Vec::with_capacity(va.numel());
                for r in 0..va.rows() {
                    let x = &va.data()[r * cols..(r + 1) * cols];
                    let y = &out_value.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let norm = tensor::l2_norm(x);
                    let gy = tensor::dot(gr, y);
                    for j in 0..cols {
                        da.push((gr[j] - gy * y[j]) / norm);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_shape_vec(va.shape().to_vec(), da).unwrap());
            }
            Op::SoftmaxLastDim(a) => {
                // Per row: dx = y ⊙ (g − Σ_j g_j·y_j).
                let va = self.value(*a);
                let cols = va.cols();
                let mut da = Vec::with_capacity(va.numel());
                for r in 0..va.rows() {
                    let y = &out_value.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let gy = tensor::dot(gr, y);
                    for j in 0..cols {
                        da.push(y[j] * (gr[j] - gy));
                    }
                }
                self.accumulate(grads, *a, Tensor::from_shape_vec(va.shape().to_vec(), da).unwrap());
            }
            Op::Transpose(a) => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g.data()[i * m + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(m, n, da).unwrap());
            }
            Op::ConcatRows(ids) => {
                let cols = g.shape()[1];
                let mut offset = 0;
                for &id in ids {
                    let v = self.value(id);
                    let rows = v.rows();
                    let chunk = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    offset += rows;
                    let contrib = Tensor::from_shape_vec(v.shape().to_vec(), chunk).unwrap();
                    self.accumulate(grads, id, contrib);
                }
            }
            Op::SliceRows { input, start, end } => {
                let vi = self.value(*input);
                let (m, n) = (vi.shape()[0], vi.shape()[1]);
                let mut da = vec![0.0; m * n];
                da[start * n..end * n].copy_from_slice(g.data());
                self.accumulate(grads, *input, Tensor::matrix(m, n, da).unwrap());
            }
            Op::OuterProduct(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (va.shape()[0], vb.shape()[0]);
                // du_i = Σ_j g_ij·v_j ; dv_j = Σ_i g_ij·u_i
                let du = tensor::matmul_mv(g.data(), vb.data(), m, n);
                let dv = tensor::matmul_vm(va.data(), g.data(), m, n);
                self.accumulate(grads, *a, Tensor::vector(du));
                self.accumulate(grads, *b, Tensor::vector(dv));
            }
        }
    }
}

/// Every primitive kind, used by gradient sweep tests to enumerate the set.
pub const ALL_PRIMITIVES: &[Primitive] = &[
    Primitive::Matmul,
    Primitive::Add,
    Primitive::Sub,
    Primitive::MulElementwise,
    Primitive::ScaleByConstant(1.7),
    Primitive::Exp,
    Primitive::Log,
    Primitive::Tanh,
    Primitive::Relu,
    Primitive::Sum,
    Primitive::Mean,
    Primitive::L2NormalizeRows,
    Primitive::SoftmaxLastDim,
    Primitive::Transpose,
    Primitive::ConcatRows,
    Primitive::SliceRows { start: 0, end: 1 },
    Primitive::OuterProduct,
];

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let p = g.softmax_lastdim(z).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut g = Graph::new();
        let eye = g
            .constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap())
            .unwrap();
        let a_vals = vec![2., -1., 3., 0.5, 4., -2., 7., 1., 9.];
        let a = g.constant(Tensor::matrix(3, 3, a_vals.clone()).unwrap()).unwrap();
        let prod = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(prod).data(), a_vals.as_slice());
    }

    #[test]
    fn l2_normalize_rows_matches_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap()).unwrap();
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        // loss = x·x at x=3 → d loss/dx = 6
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().scalar_value(), 6.0);
    }

    #[test]
    fn backward_of_softmax_sum_is_zero() {
        // softmax rows sum to 1 identically, so the gradient vanishes.
        let mut g = Graph::new();
        let z = g.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]), true).unwrap();
        let p = g.softmax_lastdim(z).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        for &d in grads.get(z).unwrap().data() {
            assert_close(d, 0.0, 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let y = g.exp(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(2.0)).unwrap();
        let y = g.exp(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
    }

    #[test]
    fn log_rejects_nonpositive_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn overflowing_exp_reports_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(g.exp(x), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_is_linear_over_loss_sums() {
        // backward(l1 + l2) == backward(l1) + backward(l2), exactly.
        let build = |which: u8| -> (Graph, NodeId, NodeId) {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![0.4, -0.7, 1.3]), true).unwrap();
            let t = g.tanh(x).unwrap();
            let l1 = g.sum(t).unwrap();
            let e = g.exp(x).unwrap();
            let l2 = g.mean(e).unwrap();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => g.add(l1, l2).unwrap(),
            };
            (g, x, loss)
        };
        let grad = |which: u8| {
            let (g, x, loss) = build(which);
            g.backward(loss).unwrap().take(x).unwrap()
        };
        let (g1, g2, gsum) = (grad(0), grad(1), grad(2));
        for i in 0..3 {
            assert_close(gsum.data()[i], g1.data()[i] + g2.data()[i], 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap(), true).unwrap();
        let b = g.leaf(Tensor::vector(vec![5., 6.]), true).unwrap();
        let cat = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(cat).shape(), &[3, 2]);
        let sl = g.slice_rows(cat, 2, 3).unwrap();
        let s = g.sum(sl).unwrap();
        let grads = g.backward(s).unwrap();
        // Only the sliced row (which came from b) receives gradient.
        assert_eq!(grads.get(a).unwrap().data(), &[0., 0., 0., 0.]);
        assert_eq!(grads.get(b).unwrap().data(), &[1., 1.]);
    }
}
