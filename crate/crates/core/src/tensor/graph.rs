use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sin(NodeId),
    Abs(NodeId),
    Recip(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    ColMin(NodeId),
    ColMax(NodeId),
    Reshape(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, Axis),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    SelectRows(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sin(_) => "sin",
            Op::Abs(_) => "abs",
            Op::Recip(_) => "recip",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ColMin(_) => "col_min",
            Op::ColMax(_) => "col_max",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SelectRows(..) => "select_rows",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sin(a)
            | Op::Abs(a)
            | Op::Recip(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::ColMin(a)
            | Op::ColMax(a)
            | Op::Reshape(a, _)
            | Op::SliceRows(a, ..)
            | Op::SliceCols(a, ..)
            | Op::SelectRows(a, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// valid topological order. Values are computed eagerly when an op is
/// recorded; [`Graph::recompute`] replays every op after leaf values
/// change.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_nonfinite: Option<(NodeId, &'static str)>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
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

    /// Gradient for `id`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Row,
}

fn broadcast(op: &'static str, node: usize, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() || (a.rows() == b.rows() && a.cols() == b.cols()) {
        Ok(Broadcast::Same)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Broadcast::Row)
    } else {
        Err(Error::ShapeMismatch {
            op,
            node,
            detail: format!("cannot broadcast {:?} against {:?}", b.shape(), a.shape()),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let bd = b.data();
    let data = match mode {
        Broadcast::Same => a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Row => {
            let c = a.cols();
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % c]))
                .collect()
        }
    };
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

/// Sums the rows of `g` when the operand was row-broadcast.
fn reduce_to(g: Tensor, mode: Broadcast, like: &Tensor) -> Tensor {
    match mode {
        Broadcast::Same => Tensor {
            shape: like.shape().to_vec(),
            data: g.data,
        },
        Broadcast::Row => {
            let c = like.cols();
            let mut out = vec![0.0; c];
            for row in g.data.chunks(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor {
                shape: like.shape().to_vec(),
                data: out,
            }
        }
    }
}

/// `c = a * b` (+ `beta * c`) on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller passes slices whose lengths cover every strided
    // index touched for the given (m, k, n); `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn arg_extreme_per_col(x: &Tensor, take_min: bool) -> Vec<usize> {
    let (r, c) = (x.rows(), x.cols());
    let mut idx = vec![0usize; c];
    for j in 0..c {
        let mut best = x.data()[j];
        for i in 1..r {
            let v = x.data()[i * c + j];
            if (take_min && v < best) || (!take_min && v > best) {
                best = v;
                idx[j] = i;
            }
        }
    }
    idx
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

    /// First node (and op) whose value contained a NaN or infinity.
    pub fn first_nonfinite(&self) -> Option<(NodeId, &'static str)> {
        self.first_nonfinite
    }

    /// Trainable leaf: gradients are accumulated into it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.check_finite(id, "leaf", &value);
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        id
    }

    /// Replaces a leaf's value. Call [`Graph::recompute`] afterwards.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) || node.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_leaf",
                node: id.0,
                detail: format!(
                    "expected a leaf of shape {:?}, got {:?}",
                    node.value.shape(),
                    value.shape()
                ),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every op node in recording order.
    pub fn recompute(&mut self) -> Result<()> {
        self.first_nonfinite = None;
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                let v = self.nodes[i].value.clone();
                self.check_finite(NodeId(i), "leaf", &v);
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.eval(&op, i)?;
            self.check_finite(NodeId(i), op.name(), &value);
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn check_finite(&mut self, id: NodeId, op: &'static str, value: &Tensor) {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            log::debug!("non-finite value produced by `{}` at node {}", op, id.0);
            self.first_nonfinite = Some((id, op));
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let index = self.nodes.len();
        let value = self.eval(&op, index)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(index);
        self.check_finite(id, op.name(), &value);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    fn eval(&self, op: &Op, index: usize) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let name = op.name();
        let out = match op {
            Op::Leaf => unreachable!("leaves are never evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if b.shape().len() != 2 || a.cols() != b.rows() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        node: index,
                        detail: format!("{:?} x {:?}", a.shape(), b.shape()),
                    });
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, 0.0, &mut c);
                Tensor {
                    shape: vec![m, n],
                    data: c,
                }
            }
            Op::Add(a, b) => {
                let mode = broadcast(name, index, v(a), v(b))?;
                zip_broadcast(v(a), v(b), mode, |x, y| x + y)
            }
            Op::Sub(a, b) => {
                let mode = broadcast(name, index, v(a), v(b))?;
                zip_broadcast(v(a), v(b), mode, |x, y| x - y)
            }
            Op::Mul(a, b) => {
                let mode = broadcast(name, index, v(a), v(b))?;
                zip_broadcast(v(a), v(b), mode, |x, y| x * y)
            }
            Op::Scale(a, s) => v(a).map(|x| x * s),
            Op::AddScalar(a, s) => v(a).map(|x| x + s),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Log(a) => v(a).map(f64::ln),
            Op::Square(a) => v(a).map(|x| x * x),
            Op::Sin(a) => v(a).map(f64::sin),
            Op::Abs(a) => v(a).map(f64::abs),
            Op::Recip(a) => v(a).map(|x| 1.0 / x),
            Op::Clamp(a, lo, hi) => v(a).map(|x| x.clamp(*lo, *hi)),
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
            Op::Mean(a) => {
                let a = v(a);
                if a.is_empty() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        node: index,
                        detail: "mean of an empty tensor".into(),
                    });
                }
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::ColMin(a) | Op::ColMax(a) => {
                let a = v(a);
                if a.rows() == 0 {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        node: index,
                        detail: "column reduction over zero rows".into(),
                    });
                }
                let take_min = matches!(op, Op::ColMin(_));
                let idx = arg_extreme_per_col(a, take_min);
                let c = a.cols();
                let data = idx.iter().enumerate().map(|(j, &i)| a.data()[i * c + j]).collect();
                Tensor {
                    shape: vec![1, c],
                    data,
                }
            }
            Op::Reshape(a, shape) => v(a).clone().reshaped(shape.clone()).map_err(|_| {
                Error::ShapeMismatch {
                    op: name,
                    node: index,
                    detail: format!("cannot reshape {:?} to {:?}", v(a).shape(), shape),
                }
            })?,
            Op::Concat(xs, axis) => {
                let parts: Vec<&Tensor> = xs.iter().map(v).collect();
                concat(&parts, *axis).ok_or_else(|| Error::ShapeMismatch {
                    op: name,
                    node: index,
                    detail: format!(
                        "incompatible parts {:?}",
                        parts.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
                    ),
                })?
            }
            Op::SliceRows(a, s, e) => {
                let a = v(a);
                if s > e || *e > a.rows() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        node: index,
                        detail: format!("rows {}..{} of {}", s, e, a.rows()),
                    });
                }
                let c = a.cols();
                Tensor {
                    shape: vec![e - s, c],
                    data: a.data()[s * c..e * c].to_vec(),
                }
            }
            Op::SliceCols(a, s, e) => {
                let a = v(a);
                if s > e || *e > a.cols() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        node: index,
                        detail: format!("cols {}..{} of {}", s, e, a.cols()),
                    });
                }
                let c = a.cols();
                let mut data = Vec::with_capacity(a.rows() * (e - s));
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.data()[r * c + s..r * c + e]);
                }
                Tensor {
                    shape: vec![a.rows(), e - s],
                    data,
                }
            }
            Op::SelectRows(a, idx) => {
                let a = v(a);
                if let Some(bad) = idx.iter().find(|&&i| i >= a.rows()) {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        node: index,
                        detail: format!("row {} out of {}", bad, a.rows()),
                    });
                }
                let c = a.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(&a.data()[i * c..(i + 1) * c]);
                }
                Tensor {
                    shape: vec![idx.len(), c],
                    data,
                }
            }
        };
        Ok(out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    /// `a + b`, where `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square(a))
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sin(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Recip(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    /// Per-column minimum, shape `[1, cols]`.
    pub fn col_min(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ColMin(a))
    }

    /// Per-column maximum, shape `[1, cols]`.
    pub fn col_max(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::ColMax(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(parts.to_vec(), Axis::Rows))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(parts.to_vec(), Axis::Cols))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceCols(a, start, end))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.push(Op::SelectRows(a, rows))
    }

    /// `x W + b` for a dense layer.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::NotScalarOutput {
                node: output.0,
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g.clone(), &mut grads);
            grads[i] = Some(g);
        }
        // Adjoints of non-differentiable nodes are meaningless; drop them.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, v) in acc.data.iter_mut().zip(&g.data) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let wants = |id: &NodeId| self.nodes[id.0].requires_grad;
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            Tensor {
                shape: x.shape().to_vec(),
                data: g.data.iter().zip(&x.data).map(|(&gi, &xi)| f(gi, xi)).collect(),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g.data, n, 1, bv.data(), 1, n, 0.0, &mut da);
                    self.accumulate(
                        grads,
                        *a,
                        Tensor {
                            shape: av.shape().to_vec(),
                            data: da,
                        },
                    );
                }
                if wants(b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), 1, k, &g.data, n, 1, 0.0, &mut db);
                    self.accumulate(
                        grads,
                        *b,
                        Tensor {
                            shape: bv.shape().to_vec(),
                            data: db,
                        },
                    );
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let mode = broadcast("add", i, v(a), v(b)).expect("validated at record time");
                if wants(a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    let gb = if matches!(node.op, Op::Sub(..)) {
                        g.map(|x| -x)
                    } else {
                        g.clone()
                    };
                    self.accumulate(grads, *b, reduce_to(gb, mode, v(b)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let mode = broadcast("mul", i, av, bv).expect("validated at record time");
                if wants(a) {
                    self.accumulate(grads, *a, zip_broadcast(&g, bv, mode, |gi, bi| gi * bi));
                }
                if wants(b) {
                    let full = Tensor {
                        shape: av.shape().to_vec(),
                        data: g.data.iter().zip(&av.data).map(|(gi, ai)| gi * ai).collect(),
                    };
                    self.accumulate(grads, *b, reduce_to(full, mode, bv));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g),
            Op::Tanh(a) => {
                let ga = elementwise(y, &|gi, yi| gi * (1.0 - yi * yi));
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = elementwise(y, &|gi, yi| gi * yi);
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = elementwise(v(a), &|gi, xi| gi / xi);
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = elementwise(v(a), &|gi, xi| 2.0 * gi * xi);
                self.accumulate(grads, *a, ga);
            }
            Op::Sin(a) => {
                let ga = elementwise(v(a), &|gi, xi| gi * xi.cos());
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = elementwise(v(a), &|gi, xi| {
                    if xi > 0.0 {
                        gi
                    } else if xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Recip(a) => {
                let ga = elementwise(y, &|gi, yi| -gi * yi * yi);
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = elementwise(v(a), &|gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) | Op::Mean(a) => {
                let av = v(a);
                let scale = if matches!(node.op, Op::Mean(_)) {
                    1.0 / av.len() as f64
                } else {
                    1.0
                };
                self.accumulate(grads, *a, Tensor::filled(av.shape(), g.item() * scale));
            }
            Op::ColMin(a) | Op::ColMax(a) => {
                let av = v(a);
                let idx = arg_extreme_per_col(av, matches!(node.op, Op::ColMin(_)));
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (j, &r) in idx.iter().enumerate() {
                    ga.data[r * c + j] += g.data[j];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a, _) => {
                let shape = v(a).shape().to_vec();
                self.accumulate(grads, *a, Tensor { shape, data: g.data });
            }
            Op::Concat(xs, axis) => {
                let mut offset = 0;
                for x in xs {
                    let xv = v(x);
                    let part = match axis {
                        Axis::Rows => {
                            let n = xv.len();
                            let d = g.data[offset..offset + n].to_vec();
                            offset += n;
                            d
                        }
                        Axis::Cols => {
                            let (r, c, total) = (xv.rows(), xv.cols(), g.cols());
                            let mut d = Vec::with_capacity(r * c);
                            for row in 0..r {
                                d.extend_from_slice(&g.data[row * total + offset..row * total + offset + c]);
                            }
                            offset += c;
                            d
                        }
                    };
                    if wants(x) {
                        self.accumulate(
                            grads,
                            *x,
                            Tensor {
                                shape: xv.shape().to_vec(),
                                data: part,
                            },
                        );
                    }
                }
            }
            Op::SliceRows(a, s, _) => {
                let av = v(a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                ga.data[s * c..s * c + g.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, s, e) => {
                let av = v(a);
                let (c, w) = (av.cols(), e - s);
                let mut ga = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    ga.data[r * c + s..r * c + e].copy_from_slice(&g.data[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SelectRows(a, idx) => {
                let av = v(a);
                let c = av.cols();
                let mut ga = Tensor::zeros(av.shape());
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga.data[src * c + j] += g.data[r * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn concat(parts: &[&Tensor], axis: Axis) -> Option<Tensor> {
    let first = parts.first()?;
    match axis {
        Axis::Rows => {
            let c = first.cols();
            if parts.iter().any(|p| p.cols() != c) {
                return None;
            }
            let rows = parts.iter().map(|p| p.rows()).sum();
            let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
            Some(Tensor {
                shape: vec![rows, c],
                data,
            })
        }
        Axis::Cols => {
            let r = first.rows();
            if parts.iter().any(|p| p.rows() != r) {
                return None;
            }
            let cols: usize = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(r * cols);
            for row in 0..r {
                for p in parts {
                    data.extend_from_slice(p.row(row));
                }
            }
            Some(Tensor {
                shape: vec![r, cols],
                data,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let x = g.constant(t(2, 3, &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]));
        let eye = g.constant(t(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(x, eye).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn tanh_zero_and_log_exp_inverse() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let tz = g.tanh(z).unwrap();
        assert_eq!(g.value(tz).item(), 0.0);

        let xs: Vec<f64> = (0..=40).map(|i| -10.0 + 0.5 * i as f64).collect();
        let x = g.constant(Tensor::new(vec![xs.len()], xs.clone()).unwrap());
        let e = g.exp(x).unwrap();
        let l = g.ln(e).unwrap();
        for (a, b) in g.value(l).data().iter().zip(&xs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_of_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[2, 3, 4], 1.0));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), 1.0);
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut g = Graph::new();
        let data = vec![0.5, -1.25, 3.0, 2.0];
        let x = g.param(Tensor::new(vec![4], data.clone()).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        for (gi, xi) in gx.data().iter().zip(&data) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn sin_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let s = g.sin(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NotScalarOutput { .. })));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, node, .. }) => {
                assert_eq!(op, "matmul");
                assert_eq!(node, 2);
            }
            other => panic!("unexpected {:?}", other),
        }
        let c = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn row_broadcast_gradient_sums_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[3, 2], 1.0));
        let b = g.param(t(1, 2, &[0.5, -0.5]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(3.0));
        let y = g.mul(c, p).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn recompute_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.param(t(2, 2, &[0.1, 0.2, 0.3, 0.4]));
        let w = g.param(t(2, 2, &[1.5, -0.5, 0.25, 2.0]));
        let h = g.matmul(x, w).unwrap();
        let a = g.tanh(h).unwrap();
        let s = g.sum(a).unwrap();
        let before = g.value(s).item();
        g.recompute().unwrap();
        assert_eq!(before.to_bits(), g.value(s).item().to_bits());
    }

    #[test]
    fn nonfinite_values_are_flagged() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let l = g.ln(x).unwrap();
        assert_eq!(g.first_nonfinite(), Some((l, "log")));
    }
}
