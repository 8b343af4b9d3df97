//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes only reference
//! earlier nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! The operation set is closed: matmul, add_bias, relu, concat_cols, scale,
//! add, elementwise_mul and log_softmax_rows, plus the identity
//! [`Tape::stop_gradient`] whose reverse pass transmits nothing. Losses such
//! as [`cross_entropy`] are composed from these.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef(usize);

impl NodeRef {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds accepted by [`Tape::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    AddBias,
    Relu,
    ConcatCols,
    Scale(f64),
    Add,
    ElementwiseMul,
    LogSoftmaxRows,
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Relu => "relu",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Scale(_) => "scale",
            OpKind::Add => "add",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
        }
    }

    fn arity(self) -> usize {
        match self {
            OpKind::Relu | OpKind::Scale(_) | OpKind::LogSoftmaxRows => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug)]
enum Record {
    Leaf,
    Param(ParamId),
    ParamRows(ParamId, Vec<usize>),
    Op(OpKind, Vec<NodeRef>),
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    record: Record,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeRef>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeRef) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn shape(&self, node: NodeRef) -> (usize, usize) {
        self.nodes[node.0].value.shape()
    }

    /// `true` if the node was produced by [`Tape::stop_gradient`].
    pub fn is_stop_gradient(&self, node: NodeRef) -> bool {
        matches!(self.nodes[node.0].record, Record::StopGradient)
    }

    fn push(&mut self, record: Record, value: Tensor) -> NodeRef {
        self.nodes.push(Node { record, value });
        NodeRef(self.nodes.len() - 1)
    }

    /// Constant or input leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeRef {
        self.push(Record::Leaf, value)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so every use of the parameter accumulates into one adjoint.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeRef {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(Record::Param(id), store.value(id).clone());
        self.params.insert(id, node);
        node
    }

    /// Leaf holding selected rows of a parameter (per-example parameters).
    pub fn param_rows(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> NodeRef {
        let value = store.value(id).select_rows(rows);
        self.push(Record::ParamRows(id, rows.to_vec()), value)
    }

    /// Appends one operation record after checking input shapes.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeRef]) -> Result<NodeRef> {
        if inputs.len() != kind.arity() {
            return Err(Error::invalid(
                "inputs",
                format!("{} takes {} inputs, got {}", kind.name(), kind.arity(), inputs.len()),
            ));
        }
        let a = &self.nodes[inputs[0].0].value;
        let mismatch = |b: &Tensor| Error::Shape {
            op: kind.name(),
            lhs: a.shape(),
            rhs: b.shape(),
        };
        let value = match kind {
            OpKind::MatMul => {
                let b = &self.nodes[inputs[1].0].value;
                a.matmul(b).map_err(|_| mismatch(b))?
            }
            OpKind::AddBias => {
                let b = &self.nodes[inputs[1].0].value;
                if b.rows() != 1 || b.cols() != a.cols() {
                    return Err(mismatch(b));
                }
                let mut out = a.clone();
                for r in 0..out.rows() {
                    for (o, bb) in out.row_mut(r).iter_mut().zip(b.data()) {
                        *o += bb;
                    }
                }
                out
            }
            OpKind::Relu => a.map(|v| v.max(0.0)),
            OpKind::ConcatCols => {
                let b = &self.nodes[inputs[1].0].value;
                a.concat_cols(b).map_err(|_| mismatch(b))?
            }
            OpKind::Scale(c) => a.map(|v| c * v),
            OpKind::Add => {
                let b = &self.nodes[inputs[1].0].value;
                if a.shape() != b.shape() {
                    return Err(mismatch(b));
                }
                a.zip_map(b, |x, y| x + y)
            }
            OpKind::ElementwiseMul => {
                let b = &self.nodes[inputs[1].0].value;
                if a.shape() != b.shape() {
                    return Err(mismatch(b));
                }
                a.zip_map(b, |x, y| x * y)
            }
            OpKind::LogSoftmaxRows => a.log_softmax_rows(),
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        Ok(self.push(Record::Op(kind, inputs.to_vec()), value))
    }

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn add_bias(&mut self, x: NodeRef, bias: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::AddBias, &[x, bias])
    }

    pub fn relu(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::Relu, &[x])
    }

    pub fn concat_cols(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::ConcatCols, &[a, b])
    }

    pub fn scale(&mut self, x: NodeRef, c: f64) -> Result<NodeRef> {
        self.forward_op(OpKind::Scale(c), &[x])
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::ElementwiseMul, &[a, b])
    }

    pub fn log_softmax_rows(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.forward_op(OpKind::LogSoftmaxRows, &[x])
    }

    /// Identity forward; zero adjoint backward.
    pub fn stop_gradient(&mut self, x: NodeRef) -> NodeRef {
        let value = self.nodes[x.0].value.clone();
        self.push(Record::StopGradient, value)
    }

    /// Sum of all entries as a 1x1 node, composed as `1ᵀ X 1`.
    pub fn sum_all(&mut self, x: NodeRef) -> Result<NodeRef> {
        let (r, c) = self.shape(x);
        let left = self.leaf(Tensor::filled(1, r, 1.0));
        let right = self.leaf(Tensor::filled(c, 1, 1.0));
        let row = self.matmul(left, x)?;
        self.matmul(row, right)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeRef) -> Result<Gradients> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(t) => t.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Record::Op(kind, inputs) = &node.record {
                match *kind {
                    OpKind::MatMul => {
                        let a = &self.nodes[inputs[0].0].value;
                        let b = &self.nodes[inputs[1].0].value;
                        acc(&mut adj[inputs[0].0], g.matmul_nt(b)?);
                        acc(&mut adj[inputs[1].0], a.matmul_tn(&g)?);
                    }
                    OpKind::AddBias => {
                        let mut db = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        acc(&mut adj[inputs[1].0], db);
                        acc(&mut adj[inputs[0].0], g.clone());
                    }
                    OpKind::Relu => {
                        let dx = g.zip_map(&node.value, |gv, y| if y > 0.0 { gv } else { 0.0 });
                        acc(&mut adj[inputs[0].0], dx);
                    }
                    OpKind::ConcatCols => {
                        let wa = self.nodes[inputs[0].0].value.cols();
                        let wb = self.nodes[inputs[1].0].value.cols();
                        acc(&mut adj[inputs[0].0], g.slice_cols(0, wa));
                        acc(&mut adj[inputs[1].0], g.slice_cols(wa, wb));
                    }
                    OpKind::Scale(c) => acc(&mut adj[inputs[0].0], g.map(|v| c * v)),
                    OpKind::Add => {
                        acc(&mut adj[inputs[1].0], g.clone());
                        acc(&mut adj[inputs[0].0], g.clone());
                    }
                    OpKind::ElementwiseMul => {
                        let a = &self.nodes[inputs[0].0].value;
                        let b = &self.nodes[inputs[1].0].value;
                        acc(&mut adj[inputs[0].0], g.zip_map(b, |x, y| x * y));
                        acc(&mut adj[inputs[1].0], g.zip_map(a, |x, y| x * y));
                    }
                    OpKind::LogSoftmaxRows => {
                        // dx = g - softmax(x) * rowsum(g), softmax(x) = exp(y)
                        let mut dx = g.clone();
                        for r in 0..dx.rows() {
                            let s: f64 = g.row(r).iter().sum();
                            for (d, y) in dx.row_mut(r).iter_mut().zip(node.value.row(r)) {
                                *d -= y.exp() * s;
                            }
                        }
                        acc(&mut adj[inputs[0].0], dx);
                    }
                }
            }
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Pushes parameter adjoints from `grads` into the store's accumulators.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(g) = &grads.adjoints[i] else { continue };
            match &node.record {
                Record::Param(id) => store.accumulate(*id, g)?,
                Record::ParamRows(id, rows) => store.accumulate_rows(*id, rows, g)?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Adjoint of a stored parameter, zeros if the loss does not reach it.
    pub fn param_grad(&self, grads: &Gradients, store: &ParamStore, id: ParamId) -> Tensor {
        let (r, c) = store.value(id).shape();
        self.params
            .get(&id)
            .and_then(|n| grads.adjoints[n.0].clone())
            .unwrap_or_else(|| Tensor::zeros(r, c))
    }
}

/// Adjoints keyed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, node: NodeRef) -> Option<&Tensor> {
        self.adjoints.get(node.0).and_then(Option::as_ref)
    }

    /// Adjoint of `node`, exactly zero when the loss does not reach it.
    pub fn get_or_zeros(&self, tape: &Tape, node: NodeRef) -> Tensor {
        self.get(node).cloned().unwrap_or_else(|| {
            let (r, c) = tape.shape(node);
            Tensor::zeros(r, c)
        })
    }
}

/// Checks that each row of `targets` is a probability distribution.
pub fn check_targets(targets: &Tensor) -> Result<()> {
    for r in 0..targets.rows() {
        let sum: f64 = targets.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-9 || targets.row(r).iter().any(|&v| v < 0.0) {
            return Err(Error::TargetNotNormalized { row: r, sum });
        }
    }
    Ok(())
}

/// Mean over rows of `-Σ_k targets[k] · log_softmax(logits)[k]`.
pub fn cross_entropy(tape: &mut Tape, logits: NodeRef, targets: &Tensor) -> Result<NodeRef> {
    let shape = tape.shape(logits);
    if targets.shape() != shape {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: targets.shape(),
        });
    }
    if shape.1 < 2 {
        return Err(Error::invalid("logits", "cross entropy needs at least 2 classes"));
    }
    check_targets(targets)?;
    let log_probs = tape.log_softmax_rows(logits)?;
    let t = tape.leaf(targets.clone());
    let weighted = tape.mul(t, log_probs)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, -1.0 / shape.0 as f64)
}

/// Largest disagreement between reverse-mode and central finite-difference
/// gradients of `loss` over every entry of every parameter in `store`.
///
/// Each entry contributes `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
/// The floor keeps entries whose true gradient is zero from dividing by
/// round-off.
pub fn gradient_check(
    store: &ParamStore,
    step: f64,
    floor: f64,
    loss: impl Fn(&mut Tape, &ParamStore) -> Result<NodeRef>,
) -> Result<f64> {
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let out = loss(&mut tape, &work)?;
    let grads = tape.backward(out)?;
    tape.accumulate_into(&grads, &mut work)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let n = loss(&mut t, s)?;
        Ok(t.value(n).item())
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        for k in 0..store.value(id).data().len() {
            let w = store.value(id).data()[k];
            probe.get_mut(id).value.data_mut()[k] = w + step;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = w - step;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = w;
            let numeric = (up - down) / (2.0 * step);
            let analytic = work.grad(id).data()[k];
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        t.set(i, y, 1.0);
    }
    Ok(t)
}
