//! Symbolic computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order. Gradients are built as new
//! graph nodes, so a gradient can itself be differentiated again (the
//! gradient-penalty path needs this).

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamId;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input(String),
    Param(ParamId),
    Const(Tensor),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// `x * s` where `s` holds a single value.
    MulByScalar(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        dilation: usize,
    },
    Conv1dInputGrad {
        g: NodeId,
        w: NodeId,
        dilation: usize,
    },
    Conv1dWeightGrad {
        g: NodeId,
        x: NodeId,
        dilation: usize,
        kernel: usize,
    },
    BiasAdd {
        x: NodeId,
        b: NodeId,
        axis: usize,
    },
    ReduceToAxis {
        x: NodeId,
        axis: usize,
    },
    BroadcastAlong {
        v: NodeId,
        axis: usize,
    },
    Relu(NodeId),
    ReluMask {
        g: NodeId,
        x: NodeId,
    },
    Sigmoid(NodeId),
    SigmoidGrad {
        g: NodeId,
        y: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    SoftmaxGrad {
        g: NodeId,
        y: NodeId,
        axis: usize,
    },
    Square(NodeId),
    Sqrt(NodeId),
    SqrtGrad {
        g: NodeId,
        y: NodeId,
    },
    Abs(NodeId),
    SignMask {
        g: NodeId,
        x: NodeId,
    },
    Sum(NodeId),
    Expand(NodeId),
    Reshape(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Pad {
        x: NodeId,
        axis: usize,
        start: usize,
        total: usize,
    },
    Bce {
        p: NodeId,
        target: NodeId,
    },
    BceGrad {
        g: NodeId,
        p: NodeId,
        target: NodeId,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulByScalar(..) => "mul_by_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv1dInputGrad { .. } => "conv1d_input_grad",
            Op::Conv1dWeightGrad { .. } => "conv1d_weight_grad",
            Op::BiasAdd { .. } => "bias_add",
            Op::ReduceToAxis { .. } => "reduce_to_axis",
            Op::BroadcastAlong { .. } => "broadcast_along",
            Op::Relu(_) => "relu",
            Op::ReluMask { .. } => "relu_mask",
            Op::Sigmoid(_) => "sigmoid",
            Op::SigmoidGrad { .. } => "sigmoid_grad",
            Op::Softmax { .. } => "softmax",
            Op::SoftmaxGrad { .. } => "softmax_grad",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::SqrtGrad { .. } => "sqrt_grad",
            Op::Abs(_) => "abs",
            Op::SignMask { .. } => "sign_mask",
            Op::Sum(_) => "sum",
            Op::Expand(_) => "expand",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Bce { .. } => "bce",
            Op::BceGrad { .. } => "bce_grad",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::Reshape(a) => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MulByScalar(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::Conv1dInputGrad { g, w, .. } => vec![*g, *w],
            Op::Conv1dWeightGrad { g, x, .. } => vec![*g, *x],
            Op::BiasAdd { x, b, .. } => vec![*x, *b],
            Op::ReduceToAxis { x, .. } => vec![*x],
            Op::BroadcastAlong { v, .. } => vec![*v],
            Op::ReluMask { g, x } | Op::SignMask { g, x } => vec![*g, *x],
            Op::SigmoidGrad { g, y } | Op::SqrtGrad { g, y } => vec![*g, *y],
            Op::Softmax { x, .. } => vec![*x],
            Op::SoftmaxGrad { g, y, .. } => vec![*g, *y],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Slice { x, .. } | Op::Pad { x, .. } => vec![*x],
            Op::Bce { p, target } => vec![*p, *target],
            Op::BceGrad { g, p, target } => vec![*g, *p, *target],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) label: Option<String>,
}

/// Values bound to the graph's named inputs for one evaluation.
#[derive(Default, Clone, Debug)]
pub struct Bindings<'a> {
    values: HashMap<String, Cow<'a, Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &str, value: Tensor) -> Self {
        self.values.insert(name.to_string(), Cow::Owned(value));
        self
    }

    pub fn bind_ref(mut self, name: &str, value: &'a Tensor) -> Self {
        self.values.insert(name.to_string(), Cow::Borrowed(value));
        self
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.values.insert(name.to_string(), Cow::Owned(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name).map(|c| c.as_ref())
    }
}

/// Source of parameter values during evaluation.
pub trait ParamSource {
    fn param(&self, id: ParamId) -> Option<&Tensor>;
}

/// A directed acyclic graph of tensor operations.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    input_nodes: HashMap<String, NodeId>,
}

fn same_shape(a: &[usize], b: &[usize]) -> bool {
    a == b
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Attaches a human-readable label, used for taps and error messages.
    pub fn set_label(&mut self, id: NodeId, label: &str) {
        self.nodes[id.0].label = Some(label.to_string());
    }

    pub fn label(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].label.as_deref()
    }

    pub fn input_node(&self, name: &str) -> Option<NodeId> {
        self.input_nodes.get(name).copied()
    }

    /// Every parameter leaf in the graph, in parameter-id order.
    pub fn param_nodes(&self) -> Vec<(ParamId, NodeId)> {
        let mut v: Vec<_> = self.param_nodes.iter().map(|(p, n)| (*p, *n)).collect();
        v.sort();
        v
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.param_nodes.get(&id).copied()
    }

    fn check(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape, label: None });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch { node: self.nodes.len(), op, detail }
    }

    /// A named placeholder bound at evaluation time.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!("input `{name}` has zero-sized dim")));
        }
        if let Some(&id) = self.input_nodes.get(name) {
            if self.shape(id) != shape {
                return Err(self.mismatch("input", format!("`{name}` redeclared with {shape:?}")));
            }
            return Ok(id);
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.input_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    /// A trainable leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId, shape: &[usize]) -> Result<NodeId> {
        if let Some(&node) = self.param_nodes.get(&id) {
            if self.shape(node) != shape {
                return Err(self.mismatch("param", format!("param {} redeclared", id.0)));
            }
            return Ok(node);
        }
        let node = self.push(Op::Param(id), shape.to_vec());
        self.param_nodes.insert(id, node);
        Ok(node)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    fn binary_same(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if !same_shape(&sa, &sb) {
            return Err(self.mismatch(op.name(), format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(op, sa))
    }

    fn unary(&mut self, a: NodeId, op: Op) -> Result<NodeId> {
        let s = self.check(a)?.shape.clone();
        Ok(self.push(op, s))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(a, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> Result<NodeId> {
        self.unary(a, Op::AddScalar(a, value))
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn mul_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let ss = self.check(s)?.shape.clone();
        if numel(&ss) != 1 {
            return Err(self.mismatch("mul_by_scalar", format!("scalar operand has shape {ss:?}")));
        }
        self.unary(x, Op::MulByScalar(x, s))
    }

    /// `op(a) · op(b)`; both operands rank 2, or both rank 3 with equal
    /// leading (batch) dimension.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        let ok_rank = (sa.len() == 2 && sb.len() == 2) || (sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0]);
        if !ok_rank {
            return Err(self.mismatch("matmul", format!("unsupported operand shapes {sa:?}, {sb:?}")));
        }
        let (m, ka) = kernels::mat_dims(&sa, ta);
        let (kb, n) = kernels::mat_dims(&sb, tb);
        if ka != kb {
            return Err(self.mismatch("matmul", format!("inner dims {ka} vs {kb} ({sa:?}, {sb:?})")));
        }
        let shape = if sa.len() == 3 { vec![sa[0], m, n] } else { vec![m, n] };
        Ok(self.push(Op::MatMul { a, b, ta, tb }, shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// `x: [B, Cin, L]`, `w: [Cout, Cin, K]` -> `[B, Cout, L]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, dilation: usize) -> Result<NodeId> {
        let sx = self.check(x)?.shape.clone();
        let sw = self.check(w)?.shape.clone();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || dilation == 0 {
            return Err(self.mismatch("conv1d", format!("input {sx:?}, kernel {sw:?}, dilation {dilation}")));
        }
        Ok(self.push(Op::Conv1d { x, w, dilation }, vec![sx[0], sw[0], sx[2]]))
    }

    fn conv1d_input_grad(&mut self, g: NodeId, w: NodeId, dilation: usize) -> Result<NodeId> {
        let sg = self.check(g)?.shape.clone();
        let sw = self.check(w)?.shape.clone();
        if sg.len() != 3 || sg[1] != sw[0] {
            return Err(self.mismatch("conv1d_input_grad", format!("{sg:?} vs {sw:?}")));
        }
        Ok(self.push(Op::Conv1dInputGrad { g, w, dilation }, vec![sg[0], sw[1], sg[2]]))
    }

    fn conv1d_weight_grad(&mut self, g: NodeId, x: NodeId, dilation: usize, kernel: usize) -> Result<NodeId> {
        let sg = self.check(g)?.shape.clone();
        let sx = self.check(x)?.shape.clone();
        if sg.len() != 3 || sx.len() != 3 || sg[0] != sx[0] || sg[2] != sx[2] {
            return Err(self.mismatch("conv1d_weight_grad", format!("{sg:?} vs {sx:?}")));
        }
        Ok(self.push(Op::Conv1dWeightGrad { g, x, dilation, kernel }, vec![sg[1], sx[1], kernel]))
    }

    /// Adds `b[c]` along axis 1 (channels for `[B, C, L]`, features for `[B, D]`).
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.check(x)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(self.mismatch("bias_add", format!("input {sx:?}, bias {sb:?}")));
        }
        Ok(self.push(Op::BiasAdd { x, b, axis: 1 }, sx))
    }

    /// Sums every axis except `axis`.
    pub fn reduce_to_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let sx = self.check(x)?.shape.clone();
        if axis >= sx.len() {
            return Err(self.mismatch("reduce_to_axis", format!("axis {axis} of {sx:?}")));
        }
        Ok(self.push(Op::ReduceToAxis { x, axis }, vec![sx[axis]]))
    }

    fn broadcast_along(&mut self, v: NodeId, axis: usize, shape: &[usize]) -> Result<NodeId> {
        let sv = self.check(v)?.shape.clone();
        if sv != [shape[axis]] {
            return Err(self.mismatch("broadcast_along", format!("{sv:?} into {shape:?}")));
        }
        Ok(self.push(Op::BroadcastAlong { v, axis }, shape.to_vec()))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu(x))
    }

    fn relu_mask(&mut self, g: NodeId, x: NodeId) -> Result<NodeId> {
        self.binary_same(g, x, Op::ReluMask { g, x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sigmoid(x))
    }

    fn sigmoid_grad(&mut self, g: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary_same(g, y, Op::SigmoidGrad { g, y })
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let sx = self.check(x)?.shape.clone();
        if axis >= sx.len() {
            return Err(self.mismatch("softmax", format!("axis {axis} of {sx:?}")));
        }
        Ok(self.push(Op::Softmax { x, axis }, sx))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sqrt(x))
    }

    fn sqrt_grad(&mut self, g: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary_same(g, y, Op::SqrtGrad { g, y })
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Abs(x))
    }

    fn sign_mask(&mut self, g: NodeId, x: NodeId) -> Result<NodeId> {
        self.binary_same(g, x, Op::SignMask { g, x })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(Op::Sum(x), vec![]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = numel(&self.check(x)?.shape);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn expand(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(&self.check(x)?.shape) != 1 {
            return Err(self.mismatch("expand", "operand is not a scalar".into()));
        }
        Ok(self.push(Op::Expand(x), shape.to_vec()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sx = self.check(x)?.shape.clone();
        if numel(&sx) != numel(shape) {
            return Err(self.mismatch("reshape", format!("{sx:?} into {shape:?}")));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.mismatch("concat", "no operands".into()));
        }
        let first = self.check(parts[0])?.shape.clone();
        if axis >= first.len() {
            return Err(self.mismatch("concat", format!("axis {axis} of {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let sp = self.check(p)?.shape.clone();
            let compatible =
                sp.len() == first.len() && sp.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(self.mismatch("concat", format!("{sp:?} vs {first:?} on axis {axis}")));
            }
            shape[axis] += sp[axis];
        }
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, shape))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.check(x)?.shape.clone();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(self.mismatch("slice", format!("[{start}, {}) on axis {axis} of {sx:?}", start + len)));
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(Op::Slice { x, axis, start, len }, shape))
    }

    fn pad(&mut self, x: NodeId, axis: usize, start: usize, total: usize) -> Result<NodeId> {
        let sx = self.check(x)?.shape.clone();
        if start + sx[axis] > total {
            return Err(self.mismatch("pad", format!("{sx:?} at {start} into {total}")));
        }
        let mut shape = sx;
        shape[axis] = total;
        Ok(self.push(Op::Pad { x, axis, start, total }, shape))
    }

    /// Mean binary cross-entropy between probabilities `p` and 0/1 targets.
    pub fn bce(&mut self, p: NodeId, target: NodeId) -> Result<NodeId> {
        let sp = self.check(p)?.shape.clone();
        let st = self.check(target)?.shape.clone();
        if sp != st {
            return Err(self.mismatch("bce", format!("{sp:?} vs {st:?}")));
        }
        Ok(self.push(Op::Bce { p, target }, vec![]))
    }

    fn bce_grad(&mut self, g: NodeId, p: NodeId, target: NodeId) -> Result<NodeId> {
        let sp = self.check(p)?.shape.clone();
        Ok(self.push(Op::BceGrad { g, p, target }, sp))
    }

    /// Builds gradient nodes of the scalar `output` with respect to each
    /// node in `wrt`. Entries are `None` when `output` does not depend on
    /// that node. The returned nodes are ordinary graph nodes and can be
    /// differentiated again.
    pub fn gradients(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
        let out_shape = self.check(output)?.shape.clone();
        if numel(&out_shape) != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        for &w in wrt {
            self.check(w)?;
        }
        let limit = output.0 + 1;
        let mut depends = vec![false; limit];
        for &w in wrt {
            if w.0 < limit {
                depends[w.0] = true;
            }
        }
        for i in 0..limit {
            if !depends[i] && self.nodes[i].op.inputs().iter().any(|p| depends[p.0]) {
                depends[i] = true;
            }
        }

        let mut cot: HashMap<usize, NodeId> = HashMap::new();
        if depends[output.0] {
            let seed = self.constant(Tensor::full(&out_shape, 1.0));
            cot.insert(output.0, seed);
        }
        for i in (0..limit).rev() {
            let Some(&h) = cot.get(&i) else { continue };
            if !depends[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let node = NodeId(i);
            for (input, contrib) in self.vjp(&op, node, h, &depends)? {
                let total = match cot.get(&input.0) {
                    Some(&prev) => self.add(prev, contrib)?,
                    None => contrib,
                };
                cot.insert(input.0, total);
            }
        }
        Ok(wrt.iter().map(|w| cot.get(&w.0).copied()).collect())
    }

    /// Vector-Jacobian products of one node, restricted to inputs that
    /// depend on the differentiation targets.
    fn vjp(&mut self, op: &Op, node: NodeId, h: NodeId, depends: &[bool]) -> Result<Vec<(NodeId, NodeId)>> {
        let d = |n: NodeId| depends[n.0];
        let mut out = Vec::new();
        match *op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                if d(a) {
                    out.push((a, h));
                }
                if d(b) {
                    out.push((b, h));
                }
            }
            Op::Mul(a, b) => {
                if d(a) {
                    out.push((a, self.mul(h, b)?));
                }
                if d(b) {
                    out.push((b, self.mul(h, a)?));
                }
            }
            Op::Scale(a, f) => out.push((a, self.scale(h, f)?)),
            Op::AddScalar(a, _) => out.push((a, h)),
            Op::MulByScalar(x, s) => {
                if d(x) {
                    out.push((x, self.mul_by_scalar(h, s)?));
                }
                if d(s) {
                    let prod = self.mul(h, x)?;
                    let total = self.sum(prod)?;
                    let shape = self.shape(s).to_vec();
                    out.push((s, self.reshape(total, &shape)?));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                if d(a) {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul_t(h, b, false, true)?,
                        (false, true) => self.matmul_t(h, b, false, false)?,
                        (true, false) => self.matmul_t(b, h, false, true)?,
                        (true, true) => self.matmul_t(b, h, true, true)?,
                    };
                    out.push((a, ga));
                }
                if d(b) {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul_t(a, h, true, false)?,
                        (false, true) => self.matmul_t(h, a, true, false)?,
                        (true, false) => self.matmul_t(a, h, false, false)?,
                        (true, true) => self.matmul_t(h, a, true, true)?,
                    };
                    out.push((b, gb));
                }
            }
            Op::Conv1d { x, w, dilation } => {
                if d(x) {
                    out.push((x, self.conv1d_input_grad(h, w, dilation)?));
                }
                if d(w) {
                    let k = self.shape(w)[2];
                    out.push((w, self.conv1d_weight_grad(h, x, dilation, k)?));
                }
            }
            Op::Conv1dInputGrad { g, w, dilation } => {
                if d(g) {
                    out.push((g, self.conv1d(h, w, dilation)?));
                }
                if d(w) {
                    let k = self.shape(w)[2];
                    out.push((w, self.conv1d_weight_grad(g, h, dilation, k)?));
                }
            }
            Op::Conv1dWeightGrad { g, x, dilation, .. } => {
                if d(g) {
                    out.push((g, self.conv1d(x, h, dilation)?));
                }
                if d(x) {
                    out.push((x, self.conv1d_input_grad(g, h, dilation)?));
                }
            }
            Op::BiasAdd { x, b, axis } => {
                if d(x) {
                    out.push((x, h));
                }
                if d(b) {
                    out.push((b, self.reduce_to_axis(h, axis)?));
                }
            }
            Op::ReduceToAxis { x, axis } => {
                let shape = self.shape(x).to_vec();
                out.push((x, self.broadcast_along(h, axis, &shape)?));
            }
            Op::BroadcastAlong { v, axis } => out.push((v, self.reduce_to_axis(h, axis)?)),
            Op::Relu(x) => out.push((x, self.relu_mask(h, x)?)),
            // The mask is piecewise constant: its second derivative is zero.
            Op::ReluMask { g, x: mask_src } => {
                if d(g) {
                    out.push((g, self.relu_mask(h, mask_src)?));
                }
            }
            Op::Sigmoid(x) => out.push((x, self.sigmoid_grad(h, node)?)),
            Op::SigmoidGrad { g, y } => {
                if d(g) {
                    out.push((g, self.sigmoid_grad(h, y)?));
                }
                if d(y) {
                    let hg = self.mul(h, g)?;
                    let lin = self.scale(y, -2.0)?;
                    let factor = self.add_scalar(lin, 1.0)?;
                    out.push((y, self.mul(hg, factor)?));
                }
            }
            Op::Softmax { x, axis } => {
                let y = node;
                let sh = self.shape(y).to_vec();
                let gr = self.push(Op::SoftmaxGrad { g: h, y, axis }, sh);
                out.push((x, gr));
            }
            Op::SoftmaxGrad { .. } => return Err(Error::UnsupportedOp("softmax_grad")),
            Op::Square(x) => {
                let two_x = self.scale(x, 2.0)?;
                out.push((x, self.mul(h, two_x)?));
            }
            Op::Sqrt(x) => out.push((x, self.sqrt_grad(h, node)?)),
            Op::SqrtGrad { g, y } => {
                if d(g) {
                    out.push((g, self.sqrt_grad(h, y)?));
                }
                if d(y) {
                    // d/dy (g / 2y) = -g / 2y^2 = -2 * sqrt_grad(sqrt_grad(g, y), y)
                    let hg = self.mul(h, g)?;
                    let once = self.sqrt_grad(hg, y)?;
                    let twice = self.sqrt_grad(once, y)?;
                    out.push((y, self.scale(twice, -2.0)?));
                }
            }
            Op::Abs(x) => out.push((x, self.sign_mask(h, x)?)),
            Op::SignMask { g, x: sign_src } => {
                if d(g) {
                    out.push((g, self.sign_mask(h, sign_src)?));
                }
            }
            Op::Sum(x) => {
                let shape = self.shape(x).to_vec();
                out.push((x, self.expand(h, &shape)?));
            }
            Op::Expand(x) => {
                let total = self.sum(h)?;
                let shape = self.shape(x).to_vec();
                out.push((x, self.reshape(total, &shape)?));
            }
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                out.push((x, self.reshape(h, &shape)?));
            }
            Op::Concat { ref parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if d(p) {
                        out.push((p, self.slice(h, axis, offset, len)?));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, .. } => {
                let total = self.shape(x)[axis];
                out.push((x, self.pad(h, axis, start, total)?));
            }
            Op::Pad { x, axis, start, .. } => {
                let len = self.shape(x)[axis];
                out.push((x, self.slice(h, axis, start, len)?));
            }
            Op::Bce { p, target } => {
                if d(target) {
                    return Err(Error::UnsupportedOp("bce (target)"));
                }
                out.push((p, self.bce_grad(h, p, target)?));
            }
            Op::BceGrad { .. } => return Err(Error::UnsupportedOp("bce_grad")),
        }
        Ok(out)
    }

    /// Evaluates `targets`, computing only the nodes they depend on.
    pub fn evaluate(
        &self,
        params: &dyn ParamSource,
        bindings: &Bindings<'_>,
        targets: &[NodeId],
        checked: bool,
    ) -> Result<Vec<Tensor>> {
        for &t in targets {
            self.check(t)?;
        }
        let last = targets.iter().map(|t| t.0).max().map_or(0, |m| m + 1);
        let mut needed = vec![false; last];
        let mut is_target = vec![false; last];
        for &t in targets {
            needed[t.0] = true;
            is_target[t.0] = true;
        }
        for i in (0..last).rev() {
            if needed[i] {
                for p in self.nodes[i].op.inputs() {
                    needed[p.0] = true;
                }
            }
        }
        let mut last_use = vec![0usize; last];
        for i in 0..last {
            if needed[i] {
                for p in self.nodes[i].op.inputs() {
                    last_use[p.0] = i;
                }
            }
        }

        let mut values: Vec<Option<Cow<'_, Tensor>>> = (0..last).map(|_| None).collect();
        for i in 0..last {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            let input_ids = node.op.inputs();
            let value = {
                let ins: Vec<&Tensor> =
                    input_ids.iter().map(|id| values[id.0].as_deref().expect("input evaluated")).collect();
                self.compute(i, node, params, bindings, &ins)?
            };
            if checked && !value.is_finite() {
                let what = match &node.label {
                    Some(l) => format!("node {i} ({}, `{l}`)", node.op.name()),
                    None => format!("node {i} ({})", node.op.name()),
                };
                return Err(Error::NonFinite { context: what });
            }
            values[i] = Some(value);
            for p in input_ids {
                if last_use[p.0] == i && !is_target[p.0] {
                    values[p.0] = None;
                }
            }
        }
        Ok(targets.iter().map(|t| values[t.0].as_deref().expect("target evaluated").clone()).collect())
    }

    fn compute<'v>(
        &self,
        index: usize,
        node: &Node,
        params: &'v dyn ParamSource,
        bindings: &'v Bindings<'_>,
        ins: &[&Tensor],
    ) -> Result<Cow<'v, Tensor>> {
        let shape = &node.shape;
        let ids = node.op.inputs();
        let get = |id: NodeId| -> &Tensor { ins[ids.iter().position(|&p| p == id).expect("operand")] };
        let map = |x: &Tensor, f: &dyn Fn(f64) -> f64| Cow::Owned(x.map(f));
        let zip = |a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Cow::Owned(Tensor::from_raw(shape.clone(), data))
        };
        let v = match &node.op {
            Op::Input(name) => {
                let t = bindings.get(name).ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::BindingShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        got: t.shape().to_vec(),
                    });
                }
                Cow::Borrowed(t)
            }
            Op::Param(id) => {
                let t = params.param(*id).ok_or(Error::MissingParameter(id.0))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        node: index,
                        op: "param",
                        detail: format!("stored {:?}, graph expects {shape:?}", t.shape()),
                    });
                }
                Cow::Borrowed(t)
            }
            Op::Const(t) => Cow::Owned(t.clone()),
            Op::Add(a, b) => zip(get(*a), get(*b), &|x, y| x + y),
            Op::Mul(a, b) => zip(get(*a), get(*b), &|x, y| x * y),
            Op::Scale(a, f) => {
                let f = *f;
                map(get(*a), &move |x| x * f)
            }
            Op::AddScalar(a, c) => {
                let c = *c;
                map(get(*a), &move |x| x + c)
            }
            Op::MulByScalar(x, s) => {
                let s = get(*s).item();
                map(get(*x), &move |v| v * s)
            }
            Op::MatMul { a, b, ta, tb } => Cow::Owned(kernels::matmul(get(*a), get(*b), *ta, *tb)),
            Op::Conv1d { x, w, dilation } => Cow::Owned(kernels::conv1d(get(*x), get(*w), *dilation)),
            Op::Conv1dInputGrad { g, w, dilation } => {
                Cow::Owned(kernels::conv1d_input_grad(get(*g), get(*w), *dilation))
            }
            Op::Conv1dWeightGrad { g, x, dilation, kernel } => {
                Cow::Owned(kernels::conv1d_weight_grad(get(*g), get(*x), *dilation, *kernel))
            }
            Op::BiasAdd { x, b, axis } => Cow::Owned(kernels::broadcast_add(get(*x), get(*b), *axis)),
            Op::ReduceToAxis { x, axis } => Cow::Owned(kernels::reduce_to_axis(get(*x), *axis)),
            Op::BroadcastAlong { v, axis } => Cow::Owned(kernels::broadcast_along(get(*v), *axis, shape)),
            Op::Relu(x) => map(get(*x), &|v| v.max(0.0)),
            Op::ReluMask { g, x } => zip(get(*g), get(*x), &|g, x| if x > 0.0 { g } else { 0.0 }),
            Op::Sigmoid(x) => map(get(*x), &kernels::sigmoid),
            Op::SigmoidGrad { g, y } => zip(get(*g), get(*y), &|g, y| g * y * (1.0 - y)),
            Op::Softmax { x, axis } => Cow::Owned(kernels::softmax(get(*x), *axis)),
            Op::SoftmaxGrad { g, y, axis } => Cow::Owned(kernels::softmax_grad(get(*g), get(*y), *axis)),
            Op::Square(x) => map(get(*x), &|v| v * v),
            Op::Sqrt(x) => map(get(*x), &f64::sqrt),
            // The derivative of sqrt at 0 is taken as 0 so an all-zero
            // gradient norm stays finite.
            Op::SqrtGrad { g, y } => zip(get(*g), get(*y), &|g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 }),
            Op::Abs(x) => map(get(*x), &f64::abs),
            Op::SignMask { g, x } => zip(get(*g), get(*x), &|g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
            Op::Sum(x) => Cow::Owned(Tensor::scalar(get(*x).sum())),
            Op::Expand(x) => Cow::Owned(Tensor::full(shape, get(*x).item())),
            Op::Reshape(x) => Cow::Owned(Tensor::from_raw(shape.clone(), get(*x).data().to_vec())),
            Op::Concat { parts, axis } => {
                let ts: Vec<&Tensor> = parts.iter().map(|p| get(*p)).collect();
                Cow::Owned(kernels::concat(&ts, *axis))
            }
            Op::Slice { x, axis, start, len } => Cow::Owned(kernels::slice(get(*x), *axis, *start, *len)),
            Op::Pad { x, axis, start, total } => Cow::Owned(kernels::pad(get(*x), *axis, *start, *total)),
            Op::Bce { p, target } => Cow::Owned(Tensor::scalar(kernels::bce(get(*p), get(*target)))),
            Op::BceGrad { g, p, target } => Cow::Owned(kernels::bce_grad(get(*g).item(), get(*p), get(*target))),
        };
        Ok(v)
    }
}

impl Graph {
    pub(crate) fn leaf_kind(&self, id: NodeId) -> Option<crate::LeafRef> {
        match &self.nodes.get(id.0)?.op {
            Op::Param(p) => Some(crate::LeafRef::Param(*p)),
            Op::Input(name) => Some(crate::LeafRef::Input(name.clone())),
            _ => None,
        }
    }
}
