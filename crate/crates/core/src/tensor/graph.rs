use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamId;

/// Operation kinds recorded on the tape. Exposed so tests can target a
/// specific backward rule with a [`BackwardFault`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBT,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Gelu,
    Tanh,
    Softmax,
    LayerNorm,
    Gather,
    SliceRows,
    SliceCols,
    ConcatRows,
    ConcatCols,
    Sum,
    Mean,
    CrossEntropy,
    BceLogits,
    SmoothL1,
    Dropout,
}

/// Scales every gradient flowing through ops of one kind. Only used to build
/// negative controls for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Tanh(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        src: usize,
        ids: Vec<usize>,
    },
    SliceRows {
        src: usize,
        start: usize,
    },
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    SmoothL1 {
        pred: usize,
        target: Vec<f64>,
    },
    Dropout {
        src: usize,
        mask: Rc<Vec<f64>>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulBT(..) => OpKind::MatMulBT,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather { .. } => OpKind::Gather,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::BceLogits { .. } => OpKind::BceLogits,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::Dropout { .. } => OpKind::Dropout,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    fault: Option<BackwardFault>,
}

/// A define-by-run computation graph. Build a fresh one for every forward
/// pass; it is single-threaded by construction (`!Sync`).
#[derive(Debug, Default)]
pub struct Graph {
    tape: RefCell<Tape>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of registered parameters after [`Graph::backward`].
#[derive(Debug, Default)]
pub struct ParamGrads {
    grads: Vec<(ParamId, Tensor)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        let g = Graph::default();
        g.tape.borrow_mut().fault = Some(fault);
        g
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: tape.nodes.len() - 1,
        }
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a trainable parameter. Registering the same id twice returns
    /// the same node, so gradients from every use accumulate in one place.
    pub fn param(&self, id: ParamId, value: &Tensor) -> Var<'_> {
        if let Some(&node) = self.tape.borrow().params.get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.tape.borrow_mut().params.insert(id, v.id);
        v
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (data, cols, rows, rg) = {
            let tape = self.tape.borrow();
            let cols = tape.nodes[first.id].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            let mut rg = false;
            for p in parts {
                let n = &tape.nodes[p.id];
                if n.value.shape().len() != 2 || n.value.cols() != cols {
                    return Err(Error::shape(
                        "concat_rows",
                        tape.nodes[first.id].value.shape(),
                        n.value.shape(),
                    ));
                }
                data.extend_from_slice(n.value.data());
                rows += n.value.rows();
                rg |= n.requires_grad;
            }
            (data, cols, rows, rg)
        };
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (value, rg) = {
            let tape = self.tape.borrow();
            let rows = tape.nodes[first.id].value.rows();
            let mut widths = Vec::with_capacity(parts.len());
            let mut rg = false;
            for p in parts {
                let n = &tape.nodes[p.id];
                if n.value.shape().len() != 2 || n.value.rows() != rows {
                    return Err(Error::shape(
                        "concat_cols",
                        tape.nodes[first.id].value.shape(),
                        n.value.shape(),
                    ));
                }
                widths.push(n.value.cols());
                rg |= n.requires_grad;
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(tape.nodes[p.id].value.row(r));
                }
            }
            (Tensor::new(vec![rows, total], data)?, rg)
        };
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Runs reverse-mode differentiation from a scalar loss. May only be
    /// called once per graph.
    pub fn backward(&self, loss: Var<'_>) -> Result<ParamGrads> {
        let mut tape = self.tape.borrow_mut();
        if tape.consumed {
            return Err(Error::DeadGraph);
        }
        if !tape.nodes[loss.id].value.is_scalar() {
            return Err(Error::NonScalarLoss(tape.nodes[loss.id].value.shape().to_vec()));
        }
        tape.consumed = true;
        let fault = tape.fault;
        let nodes = &tape.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            let scaled;
            let g: &[f64] = match fault {
                Some(f) if f.op == node.op.kind() => {
                    scaled = g.iter().map(|v| v * f.factor).collect::<Vec<_>>();
                    &scaled
                }
                _ => g,
            };
            propagate(nodes, node, g, lower);
            if !matches!(node.op, Op::Leaf) {
                upper[0] = None;
            }
        }

        let mut out: Vec<(ParamId, Tensor)> = tape
            .params
            .iter()
            .map(|(&pid, &node)| {
                let shape = nodes[node].value.shape().to_vec();
                let g = grads[node].clone().unwrap_or_else(|| vec![0.0; nodes[node].value.numel()]);
                (pid, Tensor { shape, data: g })
            })
            .collect();
        out.sort_by_key(|(p, _)| *p);
        tape.grads = grads;
        Ok(ParamGrads { grads: out })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = (val(a).rows(), val(a).cols());
            let n = val(b).cols();
            if wants(a) {
                let ga = kernels::matmul_bt(g, val(b).data(), m, n, k);
                kernels::add_assign(slot(grads, a, m * k), &ga);
            }
            if wants(b) {
                kernels::matmul_at_acc(slot(grads, b, k * n), val(a).data(), g, m, k, n);
            }
        }
        &Op::MatMulBT(a, b) => {
            let (m, k) = (val(a).rows(), val(a).cols());
            let n = val(b).rows();
            if wants(a) {
                let ga = kernels::matmul(g, val(b).data(), m, n, k);
                kernels::add_assign(slot(grads, a, m * k), &ga);
            }
            if wants(b) {
                kernels::matmul_at_acc(slot(grads, b, n * k), g, val(a).data(), m, n, k);
            }
        }
        &Op::Add(a, b) => {
            for i in [a, b] {
                if wants(i) {
                    kernels::add_assign(slot(grads, i, g.len()), g);
                }
            }
        }
        &Op::Sub(a, b) => {
            if wants(a) {
                kernels::add_assign(slot(grads, a, g.len()), g);
            }
            if wants(b) {
                for (d, s) in slot(grads, b, g.len()).iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        &Op::Mul(a, b) => {
            for (i, other) in [(a, b), (b, a)] {
                if wants(i) {
                    let o = val(other).data();
                    for ((d, s), ov) in slot(grads, i, g.len()).iter_mut().zip(g).zip(o) {
                        *d += s * ov;
                    }
                }
            }
        }
        &Op::AddRow(a, bias) => {
            if wants(a) {
                kernels::add_assign(slot(grads, a, g.len()), g);
            }
            if wants(bias) {
                let c = val(bias).numel();
                let gb = slot(grads, bias, c);
                for row in g.chunks(c) {
                    kernels::add_assign(gb, row);
                }
            }
        }
        &Op::Scale(a, s) => {
            for (d, v) in slot(grads, a, g.len()).iter_mut().zip(g) {
                *d += s * v;
            }
        }
        &Op::Gelu(a) => {
            let x = val(a).data();
            for ((d, v), xv) in slot(grads, a, g.len()).iter_mut().zip(g).zip(x) {
                *d += v * kernels::gelu_grad(*xv);
            }
        }
        &Op::Tanh(a) => {
            let y = node.value.data();
            for ((d, v), yv) in slot(grads, a, g.len()).iter_mut().zip(g).zip(y) {
                *d += v * (1.0 - yv * yv);
            }
        }
        &Op::Softmax(a) => {
            let cols = node.value.cols();
            let y = node.value.data();
            let ga = slot(grads, a, g.len());
            for ((grow, yrow), drow) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                let inner = kernels::dot(grow, yrow);
                for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d += yv * (gv - inner);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let d = val(gamma).numel();
            let gm = val(gamma).data();
            if wants(x) {
                let gx = slot(grads, x, g.len());
                let mut gy = vec![0.0; d];
                for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        gy[j] = grow[j] * gm[j];
                    }
                    let mean_gy = gy.iter().sum::<f64>() / d as f64;
                    let mean_gyh = kernels::dot(&gy, hrow) / d as f64;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += rstd[r] * (gy[j] - mean_gy - hrow[j] * mean_gyh);
                    }
                }
            }
            if wants(gamma) {
                let gg = slot(grads, gamma, d);
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if wants(beta) {
                let gb = slot(grads, beta, d);
                for grow in g.chunks(d) {
                    kernels::add_assign(gb, grow);
                }
            }
        }
        Op::Gather { src, ids } => {
            let c = val(*src).cols();
            let gs = slot(grads, *src, val(*src).numel());
            for (row, &id) in g.chunks(c).zip(ids) {
                kernels::add_assign(&mut gs[id * c..(id + 1) * c], row);
            }
        }
        &Op::SliceRows { src, start } => {
            let c = val(src).cols();
            let gs = slot(grads, src, val(src).numel());
            kernels::add_assign(&mut gs[start * c..start * c + g.len()], g);
        }
        &Op::SliceCols { src, start } => {
            let c = val(src).cols();
            let w = node.value.cols();
            let gs = slot(grads, src, val(src).numel());
            for (r, row) in g.chunks(w).enumerate() {
                kernels::add_assign(&mut gs[r * c + start..r * c + start + w], row);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                if wants(p) {
                    kernels::add_assign(slot(grads, p, n), &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                if wants(p) {
                    let gp = slot(grads, p, val(p).numel());
                    for (r, row) in g.chunks(total).enumerate() {
                        kernels::add_assign(&mut gp[r * w..(r + 1) * w], &row[offset..offset + w]);
                    }
                }
                offset += w;
            }
        }
        &Op::Sum(a) => {
            for d in slot(grads, a, val(a).numel()).iter_mut() {
                *d += g[0];
            }
        }
        &Op::Mean(a) => {
            let n = val(a).numel();
            let s = g[0] / n as f64;
            for d in slot(grads, a, n).iter_mut() {
                *d += s;
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = val(*logits).cols();
            let s = g[0] / targets.len() as f64;
            let gl = slot(grads, *logits, probs.len());
            for (r, &t) in targets.iter().enumerate() {
                for j in 0..c {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    gl[r * c + j] += s * (probs[r * c + j] - onehot);
                }
            }
        }
        Op::BceLogits { logits, targets } => {
            let x = val(*logits).data();
            let s = g[0] / targets.len() as f64;
            for ((d, xv), t) in slot(grads, *logits, x.len()).iter_mut().zip(x).zip(targets) {
                *d += s * (kernels::sigmoid(*xv) - t);
            }
        }
        Op::SmoothL1 { pred, target } => {
            let p = val(*pred).data();
            let s = g[0] / target.len() as f64;
            for ((d, pv), t) in slot(grads, *pred, p.len()).iter_mut().zip(p).zip(target) {
                let r = pv - t;
                *d += s * if r.abs() < 1.0 { r } else { r.signum() };
            }
        }
        Op::Dropout { src, mask } => {
            for ((d, v), m) in slot(grads, *src, g.len()).iter_mut().zip(g).zip(mask.iter()) {
                *d += v * m;
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.tape.borrow().nodes[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.tape.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tape.borrow().nodes[self.id].requires_grad
    }

    /// Gradient of the last backward pass with respect to this leaf.
    pub fn grad(&self) -> Option<Tensor> {
        let tape = self.graph.tape.borrow();
        let g = tape.grads.get(self.id)?.as_ref()?;
        Some(Tensor {
            shape: tape.nodes[self.id].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'g>> {
        let (value, rg) = {
            let tape = self.graph.tape.borrow();
            let n = &tape.nodes[self.id];
            (f(&n.value)?, n.requires_grad)
        };
        Ok(self.graph.push(value, op, rg))
    }

    fn binary(&self, other: &Var<'g>, f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'g>> {
        self.same_graph(other);
        let (value, rg) = {
            let tape = self.graph.tape.borrow();
            let (a, b) = (&tape.nodes[self.id], &tape.nodes[other.id]);
            (f(&a.value, &b.value)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(value, op, rg))
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            |a, b| {
                let (m, k) = a.matrix_dims("matmul")?;
                let (k2, n) = b.matrix_dims("matmul")?;
                if k != k2 {
                    return Err(Error::shape("matmul", a.shape(), b.shape()));
                }
                Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
            },
            Op::MatMul(self.id, other.id),
        )
    }

    /// `self · otherᵀ`
    pub fn matmul_bt(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            |a, b| {
                let (m, k) = a.matrix_dims("matmul_bt")?;
                let (n, k2) = b.matrix_dims("matmul_bt")?;
                if k != k2 {
                    return Err(Error::shape("matmul_bt", a.shape(), b.shape()));
                }
                Tensor::new(vec![m, n], kernels::matmul_bt(a.data(), b.data(), m, k, n))
            },
            Op::MatMulBT(self.id, other.id),
        )
    }

    fn zip_with(&self, other: &Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'g>> {
        self.binary(
            other,
            |a, b| {
                if a.shape() != b.shape() {
                    return Err(Error::shape(name, a.shape(), b.shape()));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y));
                Tensor::new(a.shape().to_vec(), data.collect())
            },
            op,
        )
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        self.binary(
            bias,
            |a, b| {
                let (_, c) = a.matrix_dims("add_row")?;
                if b.shape() != [c] {
                    return Err(Error::shape("add_row", a.shape(), b.shape()));
                }
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(c) {
                    kernels::add_assign(row, b.data());
                }
                Ok(out)
            },
            Op::AddRow(self.id, bias.id),
        )
    }

    pub fn scale(&self, s: f64) -> Result<Var<'g>> {
        self.unary(|a| Ok(a.map(|x| x * s)), Op::Scale(self.id, s))
    }

    pub fn gelu(&self) -> Result<Var<'g>> {
        self.unary(|a| Ok(a.map(kernels::gelu)), Op::Gelu(self.id))
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        self.unary(|a| Ok(a.map(f64::tanh)), Op::Tanh(self.id))
    }

    pub fn softmax_rows(&self) -> Result<Var<'g>> {
        self.softmax_impl(None)
    }

    /// Softmax over each row where `mask[r*c + j] == false` receives exactly
    /// zero weight. A row with every entry masked is an error.
    pub fn masked_softmax_rows(&self, mask: &[bool]) -> Result<Var<'g>> {
        self.softmax_impl(Some(mask))
    }

    fn softmax_impl(&self, mask: Option<&[bool]>) -> Result<Var<'g>> {
        self.unary(
            |a| {
                if a.shape().len() != 2 {
                    return Err(Error::invalid("softmax_rows", "expected a matrix"));
                }
                if let Some(m) = mask {
                    if m.len() != a.numel() {
                        return Err(Error::shape("softmax_rows", a.shape(), &[m.len()]));
                    }
                }
                if a.data().iter().any(|v| v.is_nan()) {
                    return Err(Error::NaN { op: "softmax_rows" });
                }
                let out = kernels::softmax_rows(a.data(), a.cols(), mask).map_err(|row| Error::AllKeysMasked { row })?;
                Tensor::new(a.shape().to_vec(), out)
            },
            Op::Softmax(self.id),
        )
    }

    /// Standardizes each row over the last axis, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.same_graph(gamma);
        self.same_graph(beta);
        let (value, xhat, rstd, rg) = {
            let tape = self.graph.tape.borrow();
            let x = &tape.nodes[self.id];
            let (gm, bt) = (&tape.nodes[gamma.id], &tape.nodes[beta.id]);
            let d = x.value.cols();
            if d < 2 || gm.value.shape() != [d] || bt.value.shape() != [d] {
                return Err(Error::shape("layer_norm", x.value.shape(), gm.value.shape()));
            }
            let rows = x.value.rows();
            let mut xhat = vec![0.0; x.value.numel()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; x.value.numel()];
            for r in 0..rows {
                let row = x.value.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = gm.value.data()[j] * h + bt.value.data()[j];
                }
            }
            let rg = x.requires_grad || gm.requires_grad || bt.requires_grad;
            (Tensor::new(x.value.shape().to_vec(), out)?, xhat, rstd, rg)
        };
        Ok(self.graph.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows by index (embedding lookup when `self` is a table).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g>> {
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let ids_owned = ids.to_vec();
        self.unary(
            |a| {
                let (rows, c) = a.matrix_dims("gather_rows")?;
                let mut data = Vec::with_capacity(ids.len() * c);
                for &i in ids {
                    if i >= rows {
                        return Err(Error::TokenOutOfRange { id: i, vocab: rows });
                    }
                    data.extend_from_slice(a.row(i));
                }
                Tensor::new(vec![ids.len(), c], data)
            },
            Op::Gather {
                src: self.id,
                ids: ids_owned,
            },
        )
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g>> {
        self.unary(
            |a| {
                let (rows, c) = a.matrix_dims("slice_rows")?;
                if start >= end || end > rows {
                    return Err(Error::invalid(
                        "slice_rows",
                        format!("range {start}..{end} invalid for {rows} rows"),
                    ));
                }
                Tensor::new(vec![end - start, c], a.data()[start * c..end * c].to_vec())
            },
            Op::SliceRows { src: self.id, start },
        )
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        self.unary(
            |a| {
                let (rows, c) = a.matrix_dims("slice_cols")?;
                if start >= end || end > c {
                    return Err(Error::invalid(
                        "slice_cols",
                        format!("range {start}..{end} invalid for {c} columns"),
                    ));
                }
                let mut data = Vec::with_capacity(rows * (end - start));
                for r in 0..rows {
                    data.extend_from_slice(&a.row(r)[start..end]);
                }
                Tensor::new(vec![rows, end - start], data)
            },
            Op::SliceCols { src: self.id, start },
        )
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        self.unary(|a| Ok(Tensor::scalar(a.data().iter().sum())), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        self.unary(
            |a| Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)),
            Op::Mean(self.id),
        )
    }

    /// Mean softmax cross-entropy of each logit row against its target class.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'g>> {
        let (value, probs, rg) = {
            let tape = self.graph.tape.borrow();
            let n = &tape.nodes[self.id];
            let (rows, c) = n.value.matrix_dims("cross_entropy")?;
            if rows != targets.len() || rows == 0 {
                return Err(Error::shape("cross_entropy", n.value.shape(), &[targets.len()]));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= c) {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("target {t} out of range for {c} classes"),
                ));
            }
            let probs = kernels::softmax_rows(n.value.data(), c, None).expect("unmasked softmax");
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = n.value.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            (Tensor::scalar(total / rows as f64), probs, n.requires_grad)
        };
        Ok(self.graph.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean elementwise sigmoid binary cross-entropy against targets in [0, 1].
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Var<'g>> {
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid("bce_with_logits", format!("target {t} outside [0, 1]")));
        }
        let targets_owned = targets.to_vec();
        self.unary(
            |a| {
                if a.numel() != targets.len() {
                    return Err(Error::shape("bce_with_logits", a.shape(), &[targets.len()]));
                }
                let total: f64 = a.data().iter().zip(targets).map(|(x, t)| kernels::softplus(*x) - t * x).sum();
                Ok(Tensor::scalar(total / targets.len() as f64))
            },
            Op::BceLogits {
                logits: self.id,
                targets: targets_owned,
            },
        )
    }

    /// Mean smooth-L1 (Huber, δ = 1) over all elements.
    pub fn smooth_l1(&self, target: &[f64]) -> Result<Var<'g>> {
        let target_owned = target.to_vec();
        self.unary(
            |a| {
                if a.numel() != target.len() {
                    return Err(Error::shape("smooth_l1", a.shape(), &[target.len()]));
                }
                let total: f64 = a
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| {
                        let r = (p - t).abs();
                        if r < 1.0 {
                            0.5 * r * r
                        } else {
                            r - 0.5
                        }
                    })
                    .sum();
                Ok(Tensor::scalar(total / target.len() as f64))
            },
            Op::SmoothL1 {
                pred: self.id,
                target: target_owned,
            },
        )
    }

    /// Inverted dropout. `rate == 0` returns `self` without recording a node.
    pub fn dropout(&self, rate: f64, rng: &mut impl Rng) -> Result<Var<'g>> {
        if rate <= 0.0 {
            return Ok(*self);
        }
        if rate >= 1.0 {
            return Err(Error::invalid("dropout", format!("rate {rate} must be < 1")));
        }
        let n = self.with_value(Tensor::numel);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let mask = Rc::new(mask);
        let m2 = Rc::clone(&mask);
        self.unary(
            move |a| {
                let data = a.data().iter().zip(m2.iter()).map(|(x, m)| x * m);
                Tensor::new(a.shape().to_vec(), data.collect())
            },
            Op::Dropout { src: self.id, mask },
        )
    }
}
