use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::broadcast::{aligned_strides, binary_map, broadcast_shape, for_each_offset};
use super::{numel, split_axis, ParamId, ParamStore, Result, Tensor, TensorError};

/// An operation with a hand-written vector-Jacobian product, recorded on the
/// tape as a single node.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input (in the order they were passed to
    /// [`Graph::custom`]), given the upstream gradient of the output.
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor)
        -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    SoftplusScaled,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Silu,
    Softplus,
    Gelu,
    Sqrt,
    Square,
    Clamp(f64, f64),
    Scale(f64),
    Shift(f64),
}

enum Op {
    Leaf,
    Param(ParamId),
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum { a: usize, axis: usize },
    SumAll(usize),
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Pad { a: usize, axis: usize, before: usize },
    IndexSelect { a: usize, axis: usize, indices: Vec<usize> },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of the operations executed in one forward pass.
///
/// Nodes are appended in execution order, so the record is already a
/// topological order; backward walks it from the loss towards the leaves.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, `None` if the loss does
    /// not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// One entry per parameter leaf that received a gradient. A parameter
    /// entered into the graph twice appears twice.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g)))
    }

    /// Total gradient for one parameter, summed over all its leaves.
    pub fn param_grad(&self, id: ParamId) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (pid, g) in self.params() {
            if pid == id {
                match acc.as_mut() {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Enters a trainable parameter as a leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Records a custom operation whose forward value was computed by the
    /// caller.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g>],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Var<'g> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.needs(&ids);
        self.push(output, Op::Custom { inputs: ids, op }, rg)
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let shape0 = first.shape();
        check_axis("concat", axis, shape0.len())?;
        let mut total = 0;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == shape0.len()
                && s.iter().zip(&shape0).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: shape0.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = shape0.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Concat { parts: ids, axis },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        let mut params = Vec::new();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(g) = grads[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(pid) = node.op {
                params.push((pid, id));
            }
            for (parent, pg) in local_grads(&nodes, node, &g) {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match grads[parent].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[parent] = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `beta * log(1 + exp(x / beta))`.
pub(crate) fn softplus_scaled(x: f64, beta: f64) -> f64 {
    beta * softplus(x / beta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn unary_fwd(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Silu => x * sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Gelu => gelu(x),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        Unary::Scale(c) => c * x,
        Unary::Shift(c) => x + c,
    }
}

/// Derivative of a unary op given its input `x` and output `y`.
fn unary_grad(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Softplus => sigmoid(x),
        Unary::Gelu => gelu_grad(x),
        Unary::Sqrt => 0.5 / y,
        Unary::Square => 2.0 * x,
        // subgradient: pass-through inside the interval, zero outside
        Unary::Clamp(lo, hi) => {
            if (lo..=hi).contains(&x) {
                1.0
            } else {
                0.0
            }
        }
        Unary::Scale(c) => c,
        Unary::Shift(_) => 1.0,
    }
}

fn binary_fwd(kind: Binary, a: f64, b: f64) -> f64 {
    match kind {
        Binary::Add => a + b,
        Binary::Sub => a - b,
        Binary::Mul => a * b,
        Binary::Div => a / b,
        Binary::SoftplusScaled => softplus_scaled(a, b),
    }
}

fn binary_grad(kind: Binary, a: f64, b: f64) -> (f64, f64) {
    match kind {
        Binary::Add => (1.0, 1.0),
        Binary::Sub => (1.0, -1.0),
        Binary::Mul => (b, a),
        Binary::Div => (1.0 / b, -a / (b * b)),
        Binary::SoftplusScaled => {
            let z = a / b;
            let s = sigmoid(z);
            (s, softplus(z) - z * s)
        }
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
        Binary::SoftplusScaled => "softplus_scaled",
    }
}

/// Matrix-multiply extents and per-batch offsets for `a @ b`.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (out batch, a batch, b batch) element offsets
    offsets: Vec<(usize, usize, usize)>,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shape(ab, bb).ok_or_else(mismatch)?;
    let sa = aligned_strides(ab, &batch);
    let sb = aligned_strides(bb, &batch);
    let mut offsets = Vec::with_capacity(numel(&batch));
    for_each_offset(&batch, &sa, &sb, |i, ia, ib| {
        offsets.push((i * m * n, ia * m * k, ib * k * n));
    });
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        m,
        k,
        n,
        out_shape,
        offsets,
    })
}

/// `c += a · b` with a: m×k, b: k×n.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with a: m×n, b: k×n, c: m×k.
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ · b` with a: m×k, b: m×n, c: k×n.
fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let r = t.shape.len();
    let (m, n) = (t.shape[r - 2], t.shape[r - 1]);
    let mut shape = t.shape.clone();
    shape.swap(r - 2, r - 1);
    let mut data = vec![0.0; t.data.len()];
    for (blk_in, blk_out) in t.data.chunks(m * n).zip(data.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                blk_out[j * m + i] = blk_in[i * n + j];
            }
        }
    }
    Tensor { shape, data }
}

fn softmax_fwd(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = split_axis(&t.shape, axis);
    let mut data = vec![0.0; t.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| t.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..len).map(|j| (t.data[at(j)] - max).exp()).sum();
            let log_denom = denom.ln();
            for j in 0..len {
                let z = t.data[at(j)] - max;
                data[at(j)] = if log { z - log_denom } else { z.exp() / denom };
            }
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data,
    }
}

fn softmax_bwd(g: &Tensor, y: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = split_axis(&y.shape, axis);
    let mut data = vec![0.0; y.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            if log {
                let gsum: f64 = (0..len).map(|j| g.data[at(j)]).sum();
                for j in 0..len {
                    data[at(j)] = g.data[at(j)] - y.data[at(j)].exp() * gsum;
                }
            } else {
                let dot: f64 = (0..len).map(|j| g.data[at(j)] * y.data[at(j)]).sum();
                for j in 0..len {
                    data[at(j)] = y.data[at(j)] * (g.data[at(j)] - dot);
                }
            }
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data,
    }
}

fn slice_fwd(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = split_axis(&t.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        data.extend_from_slice(&t.data[base..base + len * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = len;
    Tensor { shape, data }
}

/// Places `t` at `start` along `axis` inside zeros of length `total`.
fn embed_along(t: &Tensor, axis: usize, start: usize, total: usize) -> Tensor {
    let (outer, n, inner) = split_axis(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = total;
    let mut data = vec![0.0; outer * total * inner];
    for o in 0..outer {
        let dst = o * total * inner + start * inner;
        data[dst..dst + n * inner].copy_from_slice(&t.data[o * n * inner..(o + 1) * n * inner]);
    }
    Tensor { shape, data }
}

fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &*nodes[i].value;
    match &node.op {
        Op::Leaf | Op::Param(_) => vec![],
        &Op::Binary(kind, a, b) => {
            let (ta, tb) = (val(a), val(b));
            let sa = aligned_strides(&ta.shape, &g.shape);
            let sb = aligned_strides(&tb.shape, &g.shape);
            let mut ga = vec![0.0; ta.numel()];
            let mut gb = vec![0.0; tb.numel()];
            for_each_offset(&g.shape, &sa, &sb, |i, ia, ib| {
                let (da, db) = binary_grad(kind, ta.data[ia], tb.data[ib]);
                ga[ia] += g.data[i] * da;
                gb[ib] += g.data[i] * db;
            });
            vec![
                (a, Tensor { shape: ta.shape.clone(), data: ga }),
                (b, Tensor { shape: tb.shape.clone(), data: gb }),
            ]
        }
        &Op::Unary(kind, a) => {
            let x = val(a);
            let y = &node.value;
            let data = g
                .data
                .iter()
                .zip(x.data.iter().zip(&y.data))
                .map(|(gv, (&xv, &yv))| gv * unary_grad(kind, xv, yv))
                .collect();
            vec![(a, Tensor { shape: x.shape.clone(), data })]
        }
        &Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let plan = plan_matmul(&ta.shape, &tb.shape).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut ga = vec![0.0; ta.numel()];
            let mut gb = vec![0.0; tb.numel()];
            for &(oo, oa, ob) in &plan.offsets {
                let gblk = &g.data[oo..oo + m * n];
                gemm_nt_acc(gblk, &tb.data[ob..ob + k * n], &mut ga[oa..oa + m * k], m, k, n);
                gemm_tn_acc(&ta.data[oa..oa + m * k], gblk, &mut gb[ob..ob + k * n], m, k, n);
            }
            vec![
                (a, Tensor { shape: ta.shape.clone(), data: ga }),
                (b, Tensor { shape: tb.shape.clone(), data: gb }),
            ]
        }
        &Op::Transpose(a) => vec![(a, transpose_last2(g))],
        &Op::Reshape(a) => vec![(
            a,
            Tensor {
                shape: val(a).shape.clone(),
                data: g.data.clone(),
            },
        )],
        &Op::Sum { a, axis } => {
            let shape = val(a).shape.clone();
            let (outer, len, inner) = split_axis(&shape, axis);
            let mut data = vec![0.0; numel(&shape)];
            for o in 0..outer {
                for j in 0..len {
                    let dst = o * len * inner + j * inner;
                    data[dst..dst + inner].copy_from_slice(&g.data[o * inner..(o + 1) * inner]);
                }
            }
            vec![(a, Tensor { shape, data })]
        }
        &Op::SumAll(a) => {
            let shape = val(a).shape.clone();
            vec![(a, Tensor::full(shape, g.data[0]))]
        }
        &Op::Softmax { a, axis } => vec![(a, softmax_bwd(g, &node.value, axis, false))],
        &Op::LogSoftmax { a, axis } => vec![(a, softmax_bwd(g, &node.value, axis, true))],
        &Op::Slice { a, axis, start } => {
            let total = val(a).shape[axis];
            vec![(a, embed_along(g, axis, start, total))]
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            parts
                .iter()
                .map(|&p| {
                    let len = val(p).shape[*axis];
                    let piece = slice_fwd(g, *axis, start, len);
                    start += len;
                    (p, piece)
                })
                .collect()
        }
        &Op::Pad { a, axis, before } => {
            let len = val(a).shape[axis];
            vec![(a, slice_fwd(g, axis, before, len))]
        }
        Op::IndexSelect { a, axis, indices } => {
            let shape = val(*a).shape.clone();
            let (outer, n, inner) = split_axis(&shape, *axis);
            let m = indices.len();
            let mut data = vec![0.0; numel(&shape)];
            for o in 0..outer {
                for (j, &src) in indices.iter().enumerate() {
                    let gi = o * m * inner + j * inner;
                    let di = o * n * inner + src * inner;
                    for t in 0..inner {
                        data[di + t] += g.data[gi + t];
                    }
                }
            }
            vec![(*a, Tensor { shape, data })]
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let gs = op.backward(g, &ins, &node.value);
            debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong arity", op.name());
            inputs
                .iter()
                .zip(gs)
                .filter_map(|(&i, gi)| gi.map(|t| (i, t)))
                .collect()
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn value(self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape.clone()
    }

    /// Value of a single-element variable.
    pub fn item(self) -> f64 {
        self.value().item()
    }

    fn binary(self, kind: Binary, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let out = binary_map(binary_name(kind), &a, &b, |x, y| binary_fwd(kind, x, y))?;
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(out, Op::Binary(kind, self.id, other.id), rg))
    }

    fn unary(self, kind: Unary) -> Var<'g> {
        let out = self.value().map(|x| unary_fwd(kind, x));
        let rg = self.graph.needs(&[self.id]);
        self.graph.push(out, Op::Unary(kind, self.id), rg)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Binary::Mul, other)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Binary::Div, other)
    }

    /// `beta * log(1 + exp(self / beta))`, broadcasting `beta`.
    pub fn softplus_scaled(self, beta: Var<'g>) -> Result<Var<'g>> {
        self.binary(Binary::SoftplusScaled, beta)
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(Unary::Neg)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Unary::Exp)
    }

    pub fn log(self) -> Result<Var<'g>> {
        if let Some(&bad) = self.value().data.iter().find(|v| !(**v > 0.0)) {
            return Err(TensorError::Domain { op: "log", value: bad });
        }
        Ok(self.unary(Unary::Log))
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        if let Some(&bad) = self.value().data.iter().find(|v| !(**v > 0.0)) {
            return Err(TensorError::Domain { op: "sqrt", value: bad });
        }
        Ok(self.unary(Unary::Sqrt))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Unary::Sigmoid)
    }

    pub fn silu(self) -> Var<'g> {
        self.unary(Unary::Silu)
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(Unary::Softplus)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(self) -> Var<'g> {
        self.unary(Unary::Gelu)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Unary::Square)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Unary::Shift(c))
    }

    /// Batched matrix product over the last two dimensions; leading
    /// dimensions broadcast.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let plan = plan_matmul(&a.shape, &b.shape)?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut data = vec![0.0; numel(&plan.out_shape)];
        for &(oo, oa, ob) in &plan.offsets {
            gemm_acc(
                &a.data[oa..oa + m * k],
                &b.data[ob..ob + k * n],
                &mut data[oo..oo + m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor {
            shape: plan.out_shape,
            data,
        };
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id), rg))
    }

    /// Swaps the last two dimensions.
    pub fn t(self) -> Result<Var<'g>> {
        let a = self.value();
        if a.rank() < 2 {
            return Err(TensorError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: a.rank(),
            });
        }
        let out = transpose_last2(&a);
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(out, Op::Transpose(self.id), rg))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(out, Op::Reshape(self.id), rg))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis("sum", axis, a.rank())?;
        let (outer, len, inner) = split_axis(&a.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &a.data[o * len * inner + j * inner..][..inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = a.shape.clone();
        shape.remove(axis);
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(Tensor { shape, data }, Op::Sum { a: self.id, axis }, rg))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or(TensorError::InvalidAxis {
                op: "mean",
                axis,
                rank: self.shape().len(),
            })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'g> {
        let s = self.value().sum();
        let rg = self.graph.needs(&[self.id]);
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id), rg)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis("softmax", axis, a.rank())?;
        let rg = self.graph.needs(&[self.id]);
        Ok(self
            .graph
            .push(softmax_fwd(&a, axis, false), Op::Softmax { a: self.id, axis }, rg))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis("log_softmax", axis, a.rank())?;
        let rg = self.graph.needs(&[self.id]);
        Ok(self
            .graph
            .push(softmax_fwd(&a, axis, true), Op::LogSoftmax { a: self.id, axis }, rg))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis("slice", axis, a.rank())?;
        if start + len > a.shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                size: a.shape[axis],
            });
        }
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(
            slice_fwd(&a, axis, start, len),
            Op::Slice { a: self.id, axis, start },
            rg,
        ))
    }

    /// Zero padding along `axis`.
    pub fn pad(self, axis: usize, before: usize, after: usize) -> Result<Var<'g>> {
        let a = self.value();
        check_axis("pad", axis, a.rank())?;
        let total = a.shape[axis] + before + after;
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(
            embed_along(&a, axis, before, total),
            Op::Pad { a: self.id, axis, before },
            rg,
        ))
    }

    /// Gathers the entries at `indices` along `axis`.
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        check_axis("index_select", axis, a.rank())?;
        let (outer, n, inner) = split_axis(&a.shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "index_select",
                index: bad,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                data.extend_from_slice(&a.data[o * n * inner + i * inner..][..inner]);
            }
        }
        let mut shape = a.shape.clone();
        shape[axis] = indices.len();
        let rg = self.graph.needs(&[self.id]);
        Ok(self.graph.push(
            Tensor { shape, data },
            Op::IndexSelect {
                a: self.id,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }
}
