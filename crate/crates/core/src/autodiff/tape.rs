use std::cell::RefCell;

use super::{AutodiffError, Tensor};

/// Binary elementwise operators. Operands must share a shape, or one of them
/// must hold a single value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Relu,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
}

impl ConvGeometry {
    fn out_h(&self) -> usize {
        self.height - self.kernel + 1
    }

    fn out_w(&self) -> usize {
        self.width - self.kernel + 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Binary(BinaryOp, usize, usize),
    Unary(UnaryOp, usize),
    Scale(usize, f64),
    Offset(usize),
    Reduce(ReduceOp, usize),
    SumAxis(usize, usize),
    MaxAxis(usize, usize),
    LogSoftmaxRows(usize),
    AddBias(usize, usize),
    Conv2d(usize, usize, usize, ConvGeometry),
    Reshape(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddBias(a, b) => vec![a, b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Reduce(_, a)
            | Op::SumAxis(a, _)
            | Op::MaxAxis(a, _)
            | Op::LogSoftmaxRows(a)
            | Op::Reshape(a) => vec![a],
            Op::Conv2d(x, w, b, _) => vec![x, w, b],
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient, only maintained for leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Node ids are assigned in creation order, so every node's inputs have
/// smaller ids than the node itself and a reverse sweep is a valid
/// topological traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

fn dim_err(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Dimension(msg.into())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input node ids of node `id`.
    pub fn inputs_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].op.inputs()
    }

    /// Registers a tensor as a leaf. Its gradient is tracked when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let op = if tensor.requires_grad() {
            Op::Leaf
        } else {
            Op::Constant
        };
        self.push_unchecked(tensor.shape().to_vec(), tensor.data().to_vec(), op, tensor.requires_grad())
    }

    /// Registers a tensor as a constant, regardless of its `requires_grad` flag.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push_unchecked(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(&Tensor::scalar(value))
    }

    fn push_unchecked(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var { tape: self, id }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var<'_>, AutodiffError> {
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite(format!("{op:?} produced {bad}")));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(shape, value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[id];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape invariant")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Vec<f64>> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) to every reachable leaf with
    /// `requires_grad`, adding into any gradient already stored there.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), AutodiffError> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(AutodiffError::Tape("loss belongs to a different tape".into()));
        }
        let updates = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(dim_err(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    root.shape
                )));
            }
            if !root.requires_grad {
                return Err(AutodiffError::Tape(
                    "loss does not depend on any tensor that requires grad".into(),
                ));
            }
            let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
            adjoint[loss.id] = Some(vec![1.0]);
            let mut leaves = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(upstream) = adjoint[id].take() else {
                    continue;
                };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaves.push((id, upstream));
                    continue;
                }
                for (input, contribution) in local_gradients(&nodes, node, &upstream) {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut adjoint[input] {
                        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            leaves
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in updates {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Gradient contributions of `node` to each of its inputs, given the
/// upstream gradient of `node`.
fn local_gradients(nodes: &[Node], node: &Node, upstream: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let g = upstream;
    match node.op {
        Op::Leaf | Op::Constant => Vec::new(),
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bv[p * n..(p + 1) * n];
                    ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    let aip = av[i * k + p];
                    if aip != 0.0 {
                        gb[p * n..(p + 1) * n]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(acc, gv)| *acc += aip * gv);
                    }
                }
            }
            vec![(a, ga), (b, gb)]
        }
        Op::Binary(op, a, b) => binary_gradients(op, &nodes[a].value, &nodes[b].value, &node.value, g)
            .into_iter()
            .zip([a, b])
            .map(|(grad, id)| (id, grad))
            .collect(),
        Op::Unary(op, a) => {
            let x = &nodes[a].value;
            let grad = match op {
                UnaryOp::Exp => g.iter().zip(&node.value).map(|(g, y)| g * y).collect(),
                UnaryOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                UnaryOp::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
                UnaryOp::Neg => g.iter().map(|g| -g).collect(),
            };
            vec![(a, grad)]
        }
        Op::Scale(a, s) => vec![(a, g.iter().map(|g| g * s).collect())],
        Op::Offset(a) => vec![(a, g.to_vec())],
        Op::Reduce(op, a) => {
            let n = nodes[a].value.len();
            let v = match op {
                ReduceOp::Sum => g[0],
                ReduceOp::Mean => g[0] / n as f64,
            };
            vec![(a, vec![v; n])]
        }
        Op::SumAxis(a, axis) => {
            let (m, n) = (nodes[a].shape[0], nodes[a].shape[1]);
            let mut grad = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    grad[i * n + j] = if axis == 0 { g[j] } else { g[i] };
                }
            }
            vec![(a, grad)]
        }
        Op::MaxAxis(a, axis) => {
            let (m, n) = (nodes[a].shape[0], nodes[a].shape[1]);
            let x = &nodes[a].value;
            let mut grad = vec![0.0; m * n];
            for (out, idx) in argmax_along(x, m, n, axis).into_iter().enumerate() {
                grad[idx] += g[out];
            }
            vec![(a, grad)]
        }
        Op::LogSoftmaxRows(a) => {
            let (m, n) = (nodes[a].shape[0], nodes[a].shape[1]);
            let y = &node.value;
            let mut grad = vec![0.0; m * n];
            for i in 0..m {
                let row = i * n..(i + 1) * n;
                let gsum: f64 = g[row.clone()].iter().sum();
                for j in row {
                    grad[j] = g[j] - y[j].exp() * gsum;
                }
            }
            vec![(a, grad)]
        }
        Op::AddBias(x, b) => {
            let n = nodes[b].value.len();
            let mut gb = vec![0.0; n];
            for chunk in g.chunks(n) {
                gb.iter_mut().zip(chunk).for_each(|(acc, v)| *acc += v);
            }
            vec![(x, g.to_vec()), (b, gb)]
        }
        Op::Conv2d(x, w, b, geo) => {
            let (gx, gw, gb) = conv2d_backward(&nodes[x].value, &nodes[w].value, g, geo);
            vec![(x, gx), (w, gw), (b, gb)]
        }
        Op::Reshape(a) => vec![(a, g.to_vec())],
    }
}

fn binary_gradients(op: BinaryOp, a: &[f64], b: &[f64], _out: &[f64], g: &[f64]) -> [Vec<f64>; 2] {
    let n = g.len();
    let at = |i: usize| if a.len() == 1 { a[0] } else { a[i] };
    let bt = |i: usize| if b.len() == 1 { b[0] } else { b[i] };
    let (full_a, full_b): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|i| {
            let (x, y, gi) = (at(i), bt(i), g[i]);
            match op {
                BinaryOp::Add => (gi, gi),
                BinaryOp::Sub => (gi, -gi),
                BinaryOp::Mul => (gi * y, gi * x),
                BinaryOp::Div => (gi / y, -gi * x / (y * y)),
                // ties route the gradient to the first operand
                BinaryOp::Max => {
                    if x >= y {
                        (gi, 0.0)
                    } else {
                        (0.0, gi)
                    }
                }
            }
        })
        .unzip();
    let fold = |full: Vec<f64>, len: usize| {
        if len == 1 && n != 1 {
            vec![full.iter().sum()]
        } else {
            full
        }
    };
    [fold(full_a, a.len()), fold(full_b, b.len())]
}

fn argmax_along(x: &[f64], m: usize, n: usize, axis: usize) -> Vec<usize> {
    if axis == 1 {
        (0..m)
            .map(|i| {
                let mut best = i * n;
                for j in 1..n {
                    if x[i * n + j] > x[best] {
                        best = i * n + j;
                    }
                }
                best
            })
            .collect()
    } else {
        (0..n)
            .map(|j| {
                let mut best = j;
                for i in 1..m {
                    if x[i * n + j] > x[best] {
                        best = i * n + j;
                    }
                }
                best
            })
            .collect()
    }
}

#[allow(clippy::needless_range_loop)]
fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], geo: ConvGeometry) -> Vec<f64> {
    let (oh, ow, k) = (geo.out_h(), geo.out_w(), geo.kernel);
    let mut out = vec![0.0; geo.batch * geo.out_channels * oh * ow];
    for n in 0..geo.batch {
        for co in 0..geo.out_channels {
            let obase = (n * geo.out_channels + co) * oh * ow;
            out[obase..obase + oh * ow].iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..geo.in_channels {
                let xbase = (n * geo.in_channels + ci) * geo.height * geo.width;
                let wbase = (co * geo.in_channels + ci) * k * k;
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = w[wbase + ki * k + kj];
                        for i in 0..oh {
                            let xrow = xbase + (i + ki) * geo.width + kj;
                            let orow = obase + i * ow;
                            for j in 0..ow {
                                out[orow + j] += wv * x[xrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::needless_range_loop)]
fn conv2d_backward(x: &[f64], w: &[f64], g: &[f64], geo: ConvGeometry) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow, k) = (geo.out_h(), geo.out_w(), geo.kernel);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; geo.out_channels];
    for n in 0..geo.batch {
        for co in 0..geo.out_channels {
            let obase = (n * geo.out_channels + co) * oh * ow;
            gb[co] += g[obase..obase + oh * ow].iter().sum::<f64>();
            for ci in 0..geo.in_channels {
                let xbase = (n * geo.in_channels + ci) * geo.height * geo.width;
                let wbase = (co * geo.in_channels + ci) * k * k;
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = w[wbase + ki * k + kj];
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let xrow = xbase + (i + ki) * geo.width + kj;
                            let orow = obase + i * ow;
                            for j in 0..ow {
                                acc += g[orow + j] * x[xrow + j];
                                gx[xrow + j] += g[orow + j] * wv;
                            }
                        }
                        gw[wbase + ki * k + kj] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    /// The single value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<(), AutodiffError> {
        self.tape.backward(*self)
    }

    /// Same values as a constant on the same tape; no gradient flows back.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(&self.value())
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<(), AutodiffError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::Tape("operands live on different tapes".into()))
        }
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(rhs)?;
        let (value, shape) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(dim_err(format!(
                    "matmul of {:?} and {:?}",
                    a.shape, b.shape
                )));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a.value[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b.value[p * n..(p + 1) * n];
                    orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
                }
            }
            (out, vec![m, n])
        };
        self.tape.push(shape, value, Op::MatMul(self.id, rhs.id))
    }

    pub fn binary(&self, op: BinaryOp, rhs: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(rhs)?;
        let (value, shape) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            let shape = if a.shape == b.shape || b.value.len() == 1 {
                a.shape.clone()
            } else if a.value.len() == 1 {
                b.shape.clone()
            } else {
                return Err(dim_err(format!(
                    "{op:?} of {:?} and {:?}",
                    a.shape, b.shape
                )));
            };
            let n: usize = shape.iter().product();
            let at = |i: usize| if a.value.len() == 1 { a.value[0] } else { a.value[i] };
            let bt = |i: usize| if b.value.len() == 1 { b.value[0] } else { b.value[i] };
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let (x, y) = (at(i), bt(i));
                out.push(match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => {
                        if y == 0.0 {
                            return Err(AutodiffError::Domain(format!(
                                "division by zero at element {i}"
                            )));
                        }
                        x / y
                    }
                    BinaryOp::Max => x.max(y),
                });
            }
            (out, shape)
        };
        self.tape.push(shape, value, Op::Binary(op, self.id, rhs.id))
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn div(&self, rhs: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(BinaryOp::Div, rhs)
    }

    pub fn maximum(&self, rhs: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(BinaryOp::Max, rhs)
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Var<'t>, AutodiffError> {
        let (value, shape) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let mut out = Vec::with_capacity(a.value.len());
            for (i, &x) in a.value.iter().enumerate() {
                out.push(match op {
                    UnaryOp::Exp => x.exp(),
                    UnaryOp::Log => {
                        if x <= 0.0 {
                            return Err(AutodiffError::Domain(format!(
                                "log of {x} at element {i}"
                            )));
                        }
                        x.ln()
                    }
                    UnaryOp::Relu => {
                        if x > 0.0 {
                            x
                        } else {
                            0.0
                        }
                    }
                    UnaryOp::Neg => -x,
                });
            }
            (out, a.shape.clone())
        };
        self.tape.push(shape, value, Op::Unary(op, self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>, AutodiffError> {
        self.unary(UnaryOp::Exp)
    }

    pub fn ln(&self) -> Result<Var<'t>, AutodiffError> {
        self.unary(UnaryOp::Log)
    }

    pub fn relu(&self) -> Result<Var<'t>, AutodiffError> {
        self.unary(UnaryOp::Relu)
    }

    pub fn neg(&self) -> Result<Var<'t>, AutodiffError> {
        self.unary(UnaryOp::Neg)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>, AutodiffError> {
        let (value, shape) = self.map_value(|x| x * factor);
        self.tape.push(shape, value, Op::Scale(self.id, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&self, delta: f64) -> Result<Var<'t>, AutodiffError> {
        let (value, shape) = self.map_value(|x| x + delta);
        self.tape.push(shape, value, Op::Offset(self.id))
    }

    fn map_value(&self, f: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<usize>) {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        (a.value.iter().map(|&x| f(x)).collect(), a.shape.clone())
    }

    pub fn reduce(&self, op: ReduceOp) -> Result<Var<'t>, AutodiffError> {
        let total = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let s: f64 = a.value.iter().sum();
            match op {
                ReduceOp::Sum => s,
                ReduceOp::Mean if a.value.is_empty() => {
                    return Err(dim_err("mean of an empty tensor"));
                }
                ReduceOp::Mean => s / a.value.len() as f64,
            }
        };
        self.tape.push(Vec::new(), vec![total], Op::Reduce(op, self.id))
    }

    pub fn sum(&self) -> Result<Var<'t>, AutodiffError> {
        self.reduce(ReduceOp::Sum)
    }

    pub fn mean(&self) -> Result<Var<'t>, AutodiffError> {
        self.reduce(ReduceOp::Mean)
    }

    fn matrix_dims(&self, axis: usize) -> Result<(usize, usize), AutodiffError> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(dim_err(format!("axis reduction needs a matrix, got {shape:?}")));
        }
        if axis > 1 {
            return Err(dim_err(format!("axis {axis} out of range for a matrix")));
        }
        Ok((shape[0], shape[1]))
    }

    /// Sums a matrix over `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        let (m, n) = self.matrix_dims(axis)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if axis == 0 {
                (0..n).map(|j| (0..m).map(|i| x[i * n + j]).sum()).collect()
            } else {
                x.chunks(n.max(1)).take(m).map(|r| r.iter().sum()).collect::<Vec<f64>>()
            }
        };
        let len = if axis == 0 { n } else { m };
        self.tape.push(vec![len], value, Op::SumAxis(self.id, axis))
    }

    /// Maximum over `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t>, AutodiffError> {
        let (m, n) = self.matrix_dims(axis)?;
        if m == 0 || n == 0 {
            return Err(dim_err("max over an empty axis"));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            argmax_along(x, m, n, axis).into_iter().map(|i| x[i]).collect::<Vec<f64>>()
        };
        let len = if axis == 0 { n } else { m };
        self.tape.push(vec![len], value, Op::MaxAxis(self.id, axis))
    }

    /// Row-wise log-softmax with max subtraction before exponentiation.
    pub fn log_softmax_rows(&self) -> Result<Var<'t>, AutodiffError> {
        let (m, n) = self.matrix_dims(1)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[i * n + j] = row[j] - lse;
                }
            }
            out
        };
        self.tape.push(vec![m, n], value, Op::LogSoftmaxRows(self.id))
    }

    /// Adds a length-`n` bias to every row of an `[m × n]` matrix.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(bias)?;
        let (value, shape) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            if x.shape.len() != 2 || b.value.len() != x.shape[1] {
                return Err(dim_err(format!("bias {:?} for matrix {:?}", b.shape, x.shape)));
            }
            let n = x.shape[1];
            let mut out = x.value.clone();
            for row in out.chunks_mut(n.max(1)) {
                row.iter_mut().zip(&b.value).for_each(|(o, bv)| *o += bv);
            }
            (out, x.shape.clone())
        };
        self.tape.push(shape, value, Op::AddBias(self.id, bias.id))
    }

    /// Stride-1, unpadded 2-D convolution.
    ///
    /// `self` is `[batch, in_channels, h, w]`, `weight` is
    /// `[out_channels, in_channels, k, k]` and `bias` is `[out_channels]`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let (value, shape, geo) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            if x.shape.len() != 4 || w.shape.len() != 4 || w.shape[2] != w.shape[3] {
                return Err(dim_err(format!("conv2d of {:?} with kernel {:?}", x.shape, w.shape)));
            }
            let geo = ConvGeometry {
                batch: x.shape[0],
                in_channels: x.shape[1],
                out_channels: w.shape[0],
                height: x.shape[2],
                width: x.shape[3],
                kernel: w.shape[2],
            };
            if w.shape[1] != geo.in_channels
                || geo.kernel == 0
                || geo.kernel > geo.height
                || geo.kernel > geo.width
                || b.value.len() != geo.out_channels
            {
                return Err(dim_err(format!(
                    "conv2d of {:?} with kernel {:?} and bias {:?}",
                    x.shape, w.shape, b.shape
                )));
            }
            let out = conv2d_forward(&x.value, &w.value, &b.value, geo);
            (out, vec![geo.batch, geo.out_channels, geo.out_h(), geo.out_w()], geo)
        };
        self.tape
            .push(shape, value, Op::Conv2d(self.id, weight.id, bias.id, geo))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if shape.iter().product::<usize>() != a.value.len() {
                return Err(dim_err(format!("cannot reshape {:?} to {shape:?}", a.shape)));
            }
            a.value.clone()
        };
        self.tape.push(shape, value, Op::Reshape(self.id))
    }
}
