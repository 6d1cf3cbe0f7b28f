//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the record in reverse and returns the
//! gradient of that scalar with respect to every leaf. Graphs are rebuilt for
//! each optimization step and are not shared across threads.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, Layout};
use super::params::{ParamId, ParamStore};
use super::tensor::{broadcast_shape, expand, Tensor};
use super::TensorError;

type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Shift { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Silu { a: NodeId },
    Sigmoid { a: NodeId },
    Softmax { a: NodeId },
    LogSumExp { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    L2Normalize { a: NodeId, norms: Vec<f64> },
    Dropout { a: NodeId, mask: Vec<f64> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    Permute { a: NodeId, axes: Vec<usize> },
    Reshape { a: NodeId },
    BroadcastTo { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    SumAll { a: NodeId },
    MaxAxis { a: NodeId, argmax: Vec<usize> },
    MaskRows { x: NodeId, token: NodeId, mask: Vec<bool> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<Vec<(u64, ParamId, NodeId)>>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_finite_check(cfg!(debug_assertions))
    }

    /// `check` makes every op fail with [`TensorError::NonFinite`] on NaN/Inf output.
    pub fn with_finite_check(check: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            check_finite: check,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Arc::new(value), Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Arc::new(value), Op::Constant, false)
    }

    /// Bind a stored parameter; frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let trainable = store.is_trainable(id);
        let var = self.push_raw(
            store.value_arc(id),
            if trainable { Op::Leaf } else { Op::Constant },
            trainable,
        );
        if trainable {
            self.bindings.borrow_mut().push((store.uid(), id, var.id));
        }
        var
    }

    /// Trainable parameters of `store` bound on this graph, in binding order.
    pub fn bound_params(&self, store: &ParamStore) -> Vec<ParamId> {
        let mut seen = std::collections::HashSet::new();
        self.bindings
            .borrow()
            .iter()
            .filter(|(s, _, _)| *s == store.uid())
            .map(|(_, p, _)| *p)
            .filter(|p| seen.insert(*p))
            .collect()
    }

    /// Add the gradients of every parameter bound from `store` (or a clone of it).
    ///
    /// Parameters that were bound but did not influence the loss receive zeros.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        let uid = store.uid();
        for &(_, pid, node) in self.bindings.borrow().iter().filter(|b| b.0 == uid) {
            match grads.by_id(node) {
                Some(g) => store.accumulate_grad(pid, g),
                None => {
                    let shape = store.value(pid).shape().to_vec();
                    store.accumulate_grad(pid, &Tensor::zeros(&shape));
                }
            }
        }
    }

    fn push_raw(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, parents: &[NodeId]) -> Result<Var<'_>, TensorError> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_raw(Arc::new(value), op, requires_grad))
    }

    fn value_of(&self, id: NodeId) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        self.push(
            "concat",
            Tensor::new(&out_shape, data)?,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf);
            let g = if is_leaf {
                continue;
            } else {
                match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            backprop_node(&nodes, id, &g, &mut grads);
        }
        // keep only leaf gradients
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, contrib: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&contrib),
        slot @ None => *slot = Some(contrib),
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return None;
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared = b.len() == 2;
    if !shared && (b.len() != a.len() || a[..a.len() - 2] != b[..b.len() - 2]) {
        return None;
    }
    Some((batch, m, k, n, shared))
}

fn backprop_node(nodes: &[Node], id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (batch, m, k, n, shared) = matmul_dims(av.shape(), bv.shape()).expect("checked in forward");
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; av.len()];
                let lb = if shared {
                    Layout::transposed(k, n).shared()
                } else {
                    Layout::transposed(k, n)
                };
                gemm(batch, m, n, k, g.data(), Layout::row_major(m, n), bv.data(), lb, &mut ga, 0.0);
                accumulate(grads, nodes, *a, Tensor::new(av.shape(), ga).unwrap());
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; bv.len()];
                if shared {
                    let rows = batch * m;
                    gemm(1, k, rows, n, av.data(), Layout::transposed(rows, k), g.data(), Layout::row_major(rows, n), &mut gb, 0.0);
                } else {
                    gemm(batch, k, m, n, av.data(), Layout::transposed(m, k), g.data(), Layout::row_major(m, n), &mut gb, 0.0);
                }
                accumulate(grads, nodes, *b, Tensor::new(bv.shape(), gb).unwrap());
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(nodes[id].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, g.sum_to_shape(nodes[*a].value.shape()));
            }
            if nodes[*b].requires_grad {
                let gb = g.sum_to_shape(nodes[*b].value.shape());
                accumulate(grads, nodes, *b, if sign < 0.0 { gb.map(|x| -x) } else { gb });
            }
        }
        Op::Mul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if nodes[*a].requires_grad {
                let be = expand(bv.data(), bv.shape(), g.shape());
                let prod: Vec<f64> = g.data().iter().zip(&be).map(|(x, y)| x * y).collect();
                let t = Tensor::new(g.shape(), prod).unwrap();
                accumulate(grads, nodes, *a, t.sum_to_shape(av.shape()));
            }
            if nodes[*b].requires_grad {
                let ae = expand(av.data(), av.shape(), g.shape());
                let prod: Vec<f64> = g.data().iter().zip(&ae).map(|(x, y)| x * y).collect();
                let t = Tensor::new(g.shape(), prod).unwrap();
                accumulate(grads, nodes, *b, t.sum_to_shape(bv.shape()));
            }
        }
        Op::Scale { a, c } => {
            let c = *c;
            accumulate(grads, nodes, *a, g.map(|x| x * c));
        }
        Op::Shift { a } => accumulate(grads, nodes, *a, g.clone()),
        Op::Exp { a } => {
            let d = g.data().iter().zip(out.data()).map(|(g, y)| g * y).collect();
            accumulate(grads, nodes, *a, Tensor::new(g.shape(), d).unwrap());
        }
        Op::Log { a } => {
            let av = &nodes[*a].value;
            let d = g.data().iter().zip(av.data()).map(|(g, x)| g / x).collect();
            accumulate(grads, nodes, *a, Tensor::new(g.shape(), d).unwrap());
        }
        Op::Silu { a } => {
            let av = &nodes[*a].value;
            let d = g
                .data()
                .iter()
                .zip(av.data())
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            accumulate(grads, nodes, *a, Tensor::new(g.shape(), d).unwrap());
        }
        Op::Sigmoid { a } => {
            let d = g.data().iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            accumulate(grads, nodes, *a, Tensor::new(g.shape(), d).unwrap());
        }
        Op::Softmax { a } => {
            let d = out.last_dim();
            let mut ga = vec![0.0; out.len()];
            for ((grow, yrow), garow) in g.data().chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((o, gi), yi) in garow.iter_mut().zip(grow).zip(yrow) {
                    *o = yi * (gi - dot);
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(out.shape(), ga).unwrap());
        }
        Op::LogSumExp { a } => {
            let av = &nodes[*a].value;
            let d = av.last_dim();
            let mut ga = vec![0.0; av.len()];
            for (r, (arow, garow)) in av.data().chunks(d).zip(ga.chunks_mut(d)).enumerate() {
                let lse = out.data()[r];
                let gr = g.data()[r];
                for (o, &x) in garow.iter_mut().zip(arow) {
                    *o = gr * (x - lse).exp();
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(av.shape(), ga).unwrap());
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = out.last_dim();
            let gv = &nodes[*gamma].value;
            if nodes[*gamma].requires_grad {
                let mut gg = vec![0.0; d];
                for (grow, hrow) in g.data().chunks(d).zip(xhat.chunks(d)) {
                    for ((o, a), b) in gg.iter_mut().zip(grow).zip(hrow) {
                        *o += a * b;
                    }
                }
                accumulate(grads, nodes, *gamma, Tensor::new(gv.shape(), gg).unwrap());
            }
            if nodes[*beta].requires_grad {
                accumulate(grads, nodes, *beta, g.sum_to_shape(nodes[*beta].value.shape()));
            }
            if nodes[*x].requires_grad {
                let mut gx = vec![0.0; out.len()];
                let dn = d as f64;
                for (r, ((grow, hrow), gxrow)) in g.data().chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..d {
                        let gh = grow[j] * gv.data()[j];
                        mean_gh += gh;
                        mean_ghx += gh * hrow[j];
                    }
                    mean_gh /= dn;
                    mean_ghx /= dn;
                    for j in 0..d {
                        let gh = grow[j] * gv.data()[j];
                        gxrow[j] = rstd[r] * (gh - mean_gh - hrow[j] * mean_ghx);
                    }
                }
                accumulate(grads, nodes, *x, Tensor::new(out.shape(), gx).unwrap());
            }
        }
        Op::L2Normalize { a, norms } => {
            let d = out.last_dim();
            let mut ga = vec![0.0; out.len()];
            for (r, ((grow, yrow), garow)) in g.data().chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)).enumerate() {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((o, gi), yi) in garow.iter_mut().zip(grow).zip(yrow) {
                    *o = (gi - yi * dot) / norms[r];
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(out.shape(), ga).unwrap());
        }
        Op::Dropout { a, mask } => {
            let d = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
            accumulate(grads, nodes, *a, Tensor::new(g.shape(), d).unwrap());
        }
        Op::Concat { parts, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut start = 0;
            for &p in parts {
                let pv = &nodes[p].value;
                let chunk = pv.shape()[*axis] * inner;
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(pv.len());
                    for o in 0..outer {
                        gp.extend_from_slice(&g.data()[o * total + start..o * total + start + chunk]);
                    }
                    accumulate(grads, nodes, p, Tensor::new(pv.shape(), gp).unwrap());
                }
                start += chunk;
            }
        }
        Op::Slice { a, axis, start } => {
            let av = &nodes[*a].value;
            let shape = av.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[*axis] * inner;
            let part = out.shape()[*axis] * inner;
            let mut ga = vec![0.0; av.len()];
            for o in 0..outer {
                ga[o * full + start * inner..o * full + start * inner + part]
                    .copy_from_slice(&g.data()[o * part..(o + 1) * part]);
            }
            accumulate(grads, nodes, *a, Tensor::new(shape, ga).unwrap());
        }
        Op::Permute { a, axes } => {
            let mut inv = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inv[ax] = i;
            }
            accumulate(grads, nodes, *a, g.permute(&inv));
        }
        Op::Reshape { a } => {
            let shape = nodes[*a].value.shape();
            accumulate(grads, nodes, *a, g.clone().reshape(shape).unwrap());
        }
        Op::BroadcastTo { a } => {
            accumulate(grads, nodes, *a, g.sum_to_shape(nodes[*a].value.shape()));
        }
        Op::SumAxis { a, axis } => {
            let shape = nodes[*a].value.shape();
            let mut keep = shape.to_vec();
            keep[*axis] = 1;
            let gk = g.clone().reshape(&keep).unwrap();
            accumulate(grads, nodes, *a, gk.broadcast_to(shape).unwrap());
        }
        Op::SumAll { a } => {
            let shape = nodes[*a].value.shape();
            accumulate(grads, nodes, *a, Tensor::full(shape, g.data()[0]));
        }
        Op::MaxAxis { a, argmax, .. } => {
            let av = &nodes[*a].value;
            let mut ga = vec![0.0; av.len()];
            for (gi, &src) in g.data().iter().zip(argmax) {
                ga[src] += gi;
            }
            accumulate(grads, nodes, *a, Tensor::new(av.shape(), ga).unwrap());
        }
        Op::MaskRows { x, token, mask } => {
            let d = out.last_dim();
            if nodes[*x].requires_grad {
                let mut gx = g.data().to_vec();
                for (row, &m) in gx.chunks_mut(d).zip(mask) {
                    if m {
                        row.fill(0.0);
                    }
                }
                accumulate(grads, nodes, *x, Tensor::new(out.shape(), gx).unwrap());
            }
            if nodes[*token].requires_grad {
                let mut gt = vec![0.0; d];
                for (row, &m) in g.data().chunks(d).zip(mask) {
                    if m {
                        for (o, v) in gt.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                let tshape = nodes[*token].value.shape();
                accumulate(grads, nodes, *token, Tensor::new(tshape, gt).unwrap());
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elementwise<'g>(
    name: &'static str,
    a: Var<'g>,
    b: Var<'g>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Tensor, [NodeId; 2]), TensorError> {
    let av = a.value();
    let bv = b.value();
    let shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op: name,
        lhs: av.shape().to_vec(),
        rhs: bv.shape().to_vec(),
    })?;
    let data: Vec<f64> = if av.shape() == bv.shape() {
        av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let ae = expand(av.data(), av.shape(), &shape);
        let be = expand(bv.data(), bv.shape(), &shape);
        ae.iter().zip(&be).map(|(&x, &y)| f(x, y)).collect()
    };
    Ok((Tensor::new(&shape, data)?, [a.id, b.id]))
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs_grad(self.id)
    }

    /// Scalar value, if this var holds exactly one element.
    pub fn item(&self) -> Option<f64> {
        self.value().item()
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'g>, TensorError> {
        let v = self.value().map(f);
        self.graph.push(name, v, op, &[self.id])
    }

    /// Batched matrix product; `rhs` is either `[k, n]` (shared) or has the same batch dims.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>, TensorError> {
        let av = self.value();
        let bv = rhs.value();
        let (batch, m, k, n, shared) = matmul_dims(av.shape(), bv.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: "matmul",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        })?;
        let mut out = vec![0.0; batch * m * n];
        let lb = if shared {
            Layout::row_major(k, n).shared()
        } else {
            Layout::row_major(k, n)
        };
        gemm(batch, m, k, n, av.data(), Layout::row_major(m, k), bv.data(), lb, &mut out, 0.0);
        let mut shape = av.shape()[..av.rank() - 2].to_vec();
        shape.extend([m, n]);
        self.graph.push(
            "matmul",
            Tensor::new(&shape, out)?,
            Op::MatMul { a: self.id, b: rhs.id },
            &[self.id, rhs.id],
        )
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (t, ids) = elementwise("add", self, rhs, |x, y| x + y)?;
        self.graph.push("add", t, Op::Add { a: ids[0], b: ids[1] }, &ids)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (t, ids) = elementwise("sub", self, rhs, |x, y| x - y)?;
        self.graph.push("sub", t, Op::Sub { a: ids[0], b: ids[1] }, &ids)
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (t, ids) = elementwise("mul", self, rhs, |x, y| x * y)?;
        self.graph.push("mul", t, Op::Mul { a: ids[0], b: ids[1] }, &ids)
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>, TensorError> {
        self.unary("scale", |x| x * c, Op::Scale { a: self.id, c })
    }

    pub fn neg(self) -> Result<Var<'g>, TensorError> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>, TensorError> {
        self.unary("add_scalar", |x| x + c, Op::Shift { a: self.id })
    }

    pub fn exp(self) -> Result<Var<'g>, TensorError> {
        self.unary("exp", f64::exp, Op::Exp { a: self.id })
    }

    pub fn log(self) -> Result<Var<'g>, TensorError> {
        self.unary("log", f64::ln, Op::Log { a: self.id })
    }

    pub fn silu(self) -> Result<Var<'g>, TensorError> {
        self.unary("silu", |x| x * sigmoid(x), Op::Silu { a: self.id })
    }

    pub fn sigmoid(self) -> Result<Var<'g>, TensorError> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid { a: self.id })
    }

    /// Softmax over the last axis (max-shifted).
    pub fn softmax(self) -> Result<Var<'g>, TensorError> {
        let v = self.value();
        let d = v.last_dim();
        let mut out = vec![0.0; v.len()];
        for (row, orow) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - mx).exp();
                s += *o;
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        self.graph.push("softmax", Tensor::new(v.shape(), out)?, Op::Softmax { a: self.id }, &[self.id])
    }

    /// `log Σ exp` over the last axis; the output drops that axis.
    pub fn logsumexp(self) -> Result<Var<'g>, TensorError> {
        let v = self.value();
        let d = v.last_dim();
        let out: Vec<f64> = v.data().chunks(d).map(logsumexp_slice).collect();
        let shape = &v.shape()[..v.rank().saturating_sub(1)];
        self.graph.push("logsumexp", Tensor::new(shape, out)?, Op::LogSumExp { a: self.id }, &[self.id])
    }

    /// LayerNorm over the last axis with affine `gamma`, `beta` of shape `[d]`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>, TensorError> {
        let v = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let d = v.last_dim();
        if gv.len() != d || bv.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: v.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = v.len() / d.max(1);
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.graph.push(
            "layer_norm",
            Tensor::new(v.shape(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Divide each last-axis row by its Euclidean norm.
    pub fn l2_normalize(self) -> Result<Var<'g>, TensorError> {
        let v = self.value();
        let d = v.last_dim();
        let mut norms = Vec::with_capacity(v.len() / d.max(1));
        let mut out = vec![0.0; v.len()];
        for (row, orow) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(TensorError::ZeroVector { op: "l2_normalize" });
            }
            for (o, x) in orow.iter_mut().zip(row) {
                *o = x / n;
            }
            norms.push(n);
        }
        self.graph.push(
            "l2_normalize",
            Tensor::new(v.shape(), out)?,
            Op::L2Normalize { a: self.id, norms },
            &[self.id],
        )
    }

    /// Inverted dropout with a mask drawn from `seed`.
    pub fn dropout(self, p: f64, seed: u64) -> Result<Var<'g>, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("p = {p} outside [0, 1)"),
            });
        }
        let v = self.value();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.with_dropout_mask(mask)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn with_dropout_mask(self, mask: Vec<f64>) -> Result<Var<'g>, TensorError> {
        let v = self.value();
        if mask.len() != v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: v.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.graph.push("dropout", Tensor::new(v.shape(), out)?, Op::Dropout { a: self.id, mask }, &[self.id])
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g>, TensorError> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("[{start}, {end}) on axis {axis} of {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&v.data()[o * full + start * inner..o * full + end * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = end - start;
        self.graph.push("slice", Tensor::new(&out_shape, data)?, Op::Slice { a: self.id, axis, start }, &[self.id])
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>, TensorError> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        let valid = axes.len() == v.rank() && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{axes:?} for rank {}", v.rank()),
            });
        }
        let out = v.permute(axes);
        self.graph.push("permute", out, Op::Permute { a: self.id, axes: axes.to_vec() }, &[self.id])
    }

    /// Swap two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'g>, TensorError> {
        let mut axes: Vec<usize> = (0..self.shape().len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("axes ({a}, {b}) for rank {}", axes.len()),
            });
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>, TensorError> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.graph.push("reshape", v, Op::Reshape { a: self.id }, &[self.id])
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g>, TensorError> {
        let v = self.value().broadcast_to(shape)?;
        self.graph.push("broadcast_to", v, Op::BroadcastTo { a: self.id }, &[self.id])
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>, TensorError> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                msg: format!("axis {axis} for rank {}", shape.len()),
            });
        }
        let mut keep = shape.to_vec();
        keep[axis] = 1;
        let reduced = v.sum_to_shape(&keep);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = reduced.reshape(&out_shape)?;
        self.graph.push("sum_axis", out, Op::SumAxis { a: self.id, axis }, &[self.id])
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>, TensorError> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }

    pub fn sum(self) -> Result<Var<'g>, TensorError> {
        let s = self.value().data().iter().sum();
        self.graph.push("sum", Tensor::scalar(s), Op::SumAll { a: self.id }, &[self.id])
    }

    pub fn mean(self) -> Result<Var<'g>, TensorError> {
        let n = self.value().len();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Maximum over `axis`, dropping it; ties route the gradient to the first maximum.
    pub fn max_axis(self, axis: usize) -> Result<Var<'g>, TensorError> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "max_axis",
                msg: format!("axis {axis} for rank {}", shape.len()),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for j in 1..n {
                    let idx = o * n * inner + j * inner + i;
                    if v.data()[idx] > v.data()[best] {
                        best = idx;
                    }
                }
                out.push(v.data()[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        self.graph.push("max_axis", Tensor::new(&out_shape, out)?, Op::MaxAxis { a: self.id, argmax }, &[self.id])
    }

    /// Replace each last-axis row where `mask` is true by `token` (shape `[d]`).
    pub fn mask_rows(self, token: Var<'g>, mask: &[bool]) -> Result<Var<'g>, TensorError> {
        let v = self.value();
        let t = token.value();
        let d = v.last_dim();
        if t.len() != d || mask.len() * d != v.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mask_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![mask.len(), t.len()],
            });
        }
        let mut out = v.data().to_vec();
        for (row, &m) in out.chunks_mut(d).zip(mask) {
            if m {
                row.copy_from_slice(t.data());
            }
        }
        self.graph.push(
            "mask_rows",
            Tensor::new(v.shape(), out)?,
            Op::MaskRows {
                x: self.id,
                token: token.id,
                mask: mask.to_vec(),
            },
            &[self.id, token.id],
        )
    }
}

pub(crate) fn logsumexp_slice(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}
