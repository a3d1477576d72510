use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{HetaError, Result};

/// Recorded operation. Operands are node ids on the same tape.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softplus(usize),
    Powf(usize, f64),
    Sum(usize),
    Expand(usize),
    SumRows(usize),
    SumLeading(usize),
    BroadcastRow(usize),
    BroadcastCol(usize),
    MaskedSoftmax(usize),
    GatherRows(usize, Arc<Vec<usize>>),
    ScatterRows(usize, Arc<Vec<usize>>),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    SliceRows(usize, usize),
    PadRows(usize, usize),
    Reshape(usize),
    IndexFlat(usize, usize),
    OneHot(usize, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations supporting reverse-mode
/// differentiation, including differentiation of gradients themselves.
///
/// A graph is single-threaded; build one per evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    id: usize,
    graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

fn shape_err(op: &'static str, detail: String) -> HetaError {
    HetaError::Shape { op, detail }
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

    /// Drops every node recorded after `mark`. Vars created after the mark
    /// must not be used afterwards.
    pub(crate) fn truncate(&self, mark: usize) {
        self.nodes.borrow_mut().truncate(mark);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(HetaError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            id: nodes.len() - 1,
            graph: self,
        })
    }

    fn push_leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(HetaError::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var {
            id: nodes.len() - 1,
            graph: self,
        })
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn var(&self, t: Tensor) -> Result<Var<'_>> {
        self.push_leaf(Arc::new(t), true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Result<Var<'_>> {
        self.push_leaf(Arc::new(t), false)
    }

    pub fn constant_arc(&self, t: Arc<Tensor>) -> Result<Var<'_>> {
        self.push_leaf(t, false)
    }

    pub fn var_arc(&self, t: Arc<Tensor>) -> Result<Var<'_>> {
        self.push_leaf(t, true)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn wrap(&self, id: usize) -> Var<'_> {
        Var { id, graph: self }
    }

    /// Gradients of the scalar `y` with respect to `wrt`, recorded on the tape
    /// so they can be differentiated again.
    pub fn grad_graph<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let yv = self.value_of(y.id);
        if !yv.shape().is_empty() {
            return Err(HetaError::NotScalar(yv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Var<'g>>> = vec![None; y.id + 1];
        grads[y.id] = Some(self.constant(Tensor::scalar(1.0))?);

        for id in (0..=y.id).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, requires) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !requires {
                continue;
            }
            for (parent, contrib) in self.backward_op(id, &op, g)? {
                grads[parent] = Some(match grads[parent] {
                    Some(acc) => acc.add(contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => Ok(g),
                None => self.constant(Tensor::zeros(w.shape().as_slice())),
            })
            .collect()
    }

    /// Gradients of the scalar `y` with respect to `wrt` as plain tensors.
    /// Nodes recorded during the backward sweep are discarded.
    pub fn grad<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let out = self
            .grad_graph(y, wrt)
            .map(|gs| gs.iter().map(|g| (*g.value()).clone()).collect());
        self.truncate(mark);
        out
    }

    /// Exact Hessian-vector product `H v` of the scalar `y` by double backward.
    pub fn hvp<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>], v: &[Tensor]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let out = (|| {
            let op = HessianOperator::new(self, y, wrt)?;
            op.apply(v)
        })();
        self.truncate(mark);
        out
    }

    fn backward_op<'g>(&'g self, id: usize, op: &Op, g: Var<'g>) -> Result<Vec<(usize, Var<'g>)>> {
        let y = self.wrap(id);
        let mut out = Vec::with_capacity(2);
        macro_rules! emit {
            ($p:expr, $e:expr) => {
                if self.requires($p) {
                    out.push(($p, $e));
                }
            };
        }
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit!(a, g);
                emit!(b, g);
            }
            Op::Sub(a, b) => {
                emit!(a, g);
                emit!(b, g.scale(-1.0)?);
            }
            Op::Mul(a, b) => {
                emit!(a, g.mul(self.wrap(b))?);
                emit!(b, g.mul(self.wrap(a))?);
            }
            Op::Scale(a, c) => emit!(a, g.scale(c)?),
            Op::AddScalar(a) => emit!(a, g),
            Op::MatMul(a, b) => {
                emit!(a, g.matmul(self.wrap(b).t()?)?);
                emit!(b, self.wrap(a).t()?.matmul(g)?);
            }
            Op::Transpose(a) => emit!(a, g.t()?),
            Op::Exp(a) => emit!(a, g.mul(y)?),
            Op::Log(a) => emit!(a, g.mul(self.wrap(a).powf(-1.0)?)?),
            Op::Tanh(a) => {
                let d = y.mul(y)?.scale(-1.0)?.add_scalar(1.0)?;
                emit!(a, g.mul(d)?);
            }
            Op::Sigmoid(a) => {
                let d = y.mul(y.scale(-1.0)?.add_scalar(1.0)?)?;
                emit!(a, g.mul(d)?);
            }
            Op::Relu(a) => {
                let step = self.value_of(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                emit!(a, g.mul(self.constant(step)?)?);
            }
            Op::Softplus(a) => emit!(a, g.mul(self.wrap(a).sigmoid()?)?),
            Op::Powf(a, p) => {
                let d = self.wrap(a).powf(p - 1.0)?.scale(p)?;
                emit!(a, g.mul(d)?);
            }
            Op::Sum(a) => emit!(a, g.expand(self.value_of(a).shape())?),
            Op::Expand(a) => emit!(a, g.sum()?),
            Op::SumRows(a) => {
                let cols = self.value_of(a).shape()[1];
                emit!(a, g.broadcast_col(cols)?);
            }
            Op::SumLeading(a) => {
                let rows = self.value_of(a).shape()[0];
                emit!(a, g.broadcast_row(rows)?);
            }
            Op::BroadcastRow(a) => emit!(a, g.sum_leading()?),
            Op::BroadcastCol(a) => emit!(a, g.sum_rows()?),
            Op::MaskedSoftmax(a) => {
                let cols = self.value_of(a).shape()[1];
                let inner = g.mul(y)?.sum_rows()?.broadcast_col(cols)?;
                emit!(a, y.mul(g.sub(inner)?)?);
            }
            Op::GatherRows(a, ref idx) => {
                let rows = self.value_of(a).shape()[0];
                emit!(a, g.scatter_rows(Arc::clone(idx), rows)?);
            }
            Op::ScatterRows(a, ref idx) => emit!(a, g.gather_rows_shared(Arc::clone(idx))?),
            Op::SliceCols(a, start) => {
                let total = self.value_of(a).shape()[1];
                emit!(a, g.pad_cols(start, total)?);
            }
            Op::PadCols(a, start) => {
                let len = self.value_of(a).shape()[1];
                emit!(a, g.slice_cols(start, len)?);
            }
            Op::SliceRows(a, start) => {
                let total = self.value_of(a).shape()[0];
                emit!(a, g.pad_rows(start, total)?);
            }
            Op::PadRows(a, start) => {
                let len = self.value_of(a).shape()[0];
                emit!(a, g.slice_rows(start, len)?);
            }
            Op::Reshape(a) => emit!(a, g.reshape(self.value_of(a).shape())?),
            Op::IndexFlat(a, i) => emit!(a, g.one_hot(i, self.value_of(a).shape())?),
            Op::OneHot(a, i) => emit!(a, g.index_flat(i)?),
        }
        Ok(out)
    }
}

/// Hessian operator of a scalar at a fixed point. The forward graph and the
/// first backward sweep are recorded once; each product only replays the
/// second backward sweep.
pub struct HessianOperator<'g> {
    graph: &'g Graph,
    wrt: Vec<Var<'g>>,
    grads: Vec<Var<'g>>,
    mark: usize,
}

impl<'g> HessianOperator<'g> {
    pub fn new(graph: &'g Graph, y: Var<'g>, wrt: &[Var<'g>]) -> Result<Self> {
        let grads = graph.grad_graph(y, wrt)?;
        Ok(Self {
            graph,
            wrt: wrt.to_vec(),
            grads,
            mark: graph.len(),
        })
    }

    /// First-order gradient values at the point.
    pub fn gradient(&self) -> Vec<Tensor> {
        self.grads.iter().map(|g| (*g.value()).clone()).collect()
    }

    pub fn apply(&self, v: &[Tensor]) -> Result<Vec<Tensor>> {
        if v.len() != self.wrt.len() {
            return Err(shape_err("hvp", format!("{} directions for {} inputs", v.len(), self.wrt.len())));
        }
        let out = (|| {
            let mut total: Option<Var<'g>> = None;
            for (g, dir) in self.grads.iter().zip(v) {
                if g.shape().as_slice() != dir.shape() {
                    return Err(shape_err(
                        "hvp",
                        format!("direction {:?} vs input {:?}", dir.shape(), g.shape()),
                    ));
                }
                let term = g.mul(self.graph.constant(dir.clone())?)?.sum()?;
                total = Some(match total {
                    Some(t) => t.add(term)?,
                    None => term,
                });
            }
            match total {
                Some(t) => self.graph.grad(t, &self.wrt),
                None => Ok(Vec::new()),
            }
        })();
        self.graph.truncate(self.mark);
        out
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn unary(&self, name: &'static str, op: Op, value: Tensor) -> Result<Var<'g>> {
        let rg = self.graph.requires(self.id);
        self.graph.push(value, op, rg, name)
    }

    fn binary(&self, other: Var<'g>, name: &'static str, op: Op, value: Tensor) -> Result<Var<'g>> {
        let rg = self.graph.requires(self.id) || self.graph.requires(other.id);
        self.graph.push(value, op, rg, name)
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().add(&other.value()).map_err(|_| {
            shape_err("add", format!("{:?} vs {:?}", self.shape(), other.shape()))
        })?;
        self.binary(other, "add", Op::Add(self.id, other.id), v)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.value().sub(&other.value()).map_err(|_| {
            shape_err("sub", format!("{:?} vs {:?}", self.shape(), other.shape()))
        })?;
        self.binary(other, "sub", Op::Sub(self.id, other.id), v)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self
            .value()
            .zip_map(&other.value(), |a, b| a * b)
            .map_err(|_| shape_err("mul", format!("{:?} vs {:?}", self.shape(), other.shape())))?;
        self.binary(other, "mul", Op::Mul(self.id, other.id), v)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        let v = self.value().scale(c);
        self.unary("scale", Op::Scale(self.id, c), v)
    }

    pub fn neg(&self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'g>> {
        let v = self.value().map(|x| x + c);
        self.unary("add_scalar", Op::AddScalar(self.id), v)
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), b.data(), &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        self.binary(other, "matmul", Op::MatMul(self.id, other.id), v)
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Var<'g>> {
        let v = self.value().transpose2()?;
        self.unary("transpose", Op::Transpose(self.id), v)
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        let v = self.value().map(f64::exp);
        self.unary("exp", Op::Exp(self.id), v)
    }

    pub fn log(&self) -> Result<Var<'g>> {
        let v = self.value().map(f64::ln);
        self.unary("log", Op::Log(self.id), v)
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        let v = self.value().map(f64::tanh);
        self.unary("tanh", Op::Tanh(self.id), v)
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        let v = self.value().map(sigmoid);
        self.unary("sigmoid", Op::Sigmoid(self.id), v)
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary("relu", Op::Relu(self.id), v)
    }

    pub fn softplus(&self) -> Result<Var<'g>> {
        let v = self.value().map(softplus);
        self.unary("softplus", Op::Softplus(self.id), v)
    }

    pub fn powf(&self, p: f64) -> Result<Var<'g>> {
        let v = self.value().map(|x| x.powf(p));
        self.unary("powf", Op::Powf(self.id, p), v)
    }

    /// tanh-approximated GELU, composed from primitives so it can be
    /// differentiated to any order.
    pub fn gelu(&self) -> Result<Var<'g>> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let inner = self.powf(3.0)?.scale(0.044715)?.add(*self)?.scale(C)?;
        let gate = inner.tanh()?.add_scalar(1.0)?.scale(0.5)?;
        self.mul(gate)
    }

    /// Sum of all entries; returns a 0-dimensional tensor.
    pub fn sum(&self) -> Result<Var<'g>> {
        let v = Tensor::scalar(self.value().sum());
        self.unary("sum", Op::Sum(self.id), v)
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if x.numel() != 1 {
            return Err(shape_err("expand", format!("source {:?} is not a scalar", x.shape())));
        }
        let v = Tensor::full(shape, x.data()[0]);
        self.unary("expand", Op::Expand(self.id), v)
    }

    /// `[r, c] -> [r, 1]` sum over the trailing dimension.
    pub fn sum_rows(&self) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let data = (0..r).map(|i| x.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let v = Tensor::new(vec![r, 1], data)?;
        self.unary("sum_rows", Op::SumRows(self.id), v)
    }

    /// `[r, c] -> [c]` sum over the leading dimension.
    pub fn sum_leading(&self) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (acc, v) in data.iter_mut().zip(&x.data()[i * c..(i + 1) * c]) {
                *acc += v;
            }
        }
        self.unary("sum_leading", Op::SumLeading(self.id), Tensor::from_vec(data))
    }

    /// `[c] -> [rows, c]`.
    pub fn broadcast_row(&self, rows: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.ndim() != 1 {
            return Err(shape_err("broadcast_row", format!("expected 1-D, got {:?}", x.shape())));
        }
        let c = x.numel();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(x.data());
        }
        self.unary("broadcast_row", Op::BroadcastRow(self.id), Tensor::new(vec![rows, c], data)?)
    }

    /// `[r, 1] -> [r, cols]`.
    pub fn broadcast_col(&self, cols: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (r, one) = x.dims2()?;
        if one != 1 {
            return Err(shape_err("broadcast_col", format!("expected [r, 1], got {:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            data.extend(std::iter::repeat(x.data()[i]).take(cols));
        }
        self.unary("broadcast_col", Op::BroadcastCol(self.id), Tensor::new(vec![r, cols], data)?)
    }

    pub fn add_row(&self, bias: Var<'g>) -> Result<Var<'g>> {
        let rows = self.value().dims2()?.0;
        self.add(bias.broadcast_row(rows)?)
    }

    pub fn mul_row(&self, w: Var<'g>) -> Result<Var<'g>> {
        let rows = self.value().dims2()?.0;
        self.mul(w.broadcast_row(rows)?)
    }

    /// Row-wise softmax over a 2-D tensor where `visible[r * cols + c]`
    /// selects the entries that take part; the rest are exactly zero.
    pub fn masked_softmax(&self, visible: &[bool]) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        if visible.len() != r * c {
            return Err(shape_err("masked_softmax", format!("mask of {} for {:?}", visible.len(), x.shape())));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let vis = &visible[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(vis)
                .filter(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, |m, (&v, _)| m.max(v));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0.0;
            for j in 0..c {
                if vis[j] {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    denom += e;
                }
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= denom;
            }
        }
        self.unary("masked_softmax", Op::MaskedSoftmax(self.id), Tensor::new(vec![r, c], out)?)
    }

    /// Select rows of a 2-D tensor (embedding lookup).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'g>> {
        self.gather_rows_shared(Arc::new(idx.to_vec()))
    }

    fn gather_rows_shared(&self, idx: Arc<Vec<usize>>) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(shape_err("gather_rows", format!("row {} of {}", i, r)));
            }
            data.extend_from_slice(x.row(i));
        }
        let v = Tensor::new(vec![idx.len(), c], data)?;
        self.unary("gather_rows", Op::GatherRows(self.id, idx), v)
    }

    fn scatter_rows(&self, idx: Arc<Vec<usize>>, rows: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (_, c) = x.dims2()?;
        let mut out = Tensor::zeros(&[rows, c]);
        for (k, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        self.unary("scatter_rows", Op::ScatterRows(self.id, idx), out)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{}..{} of {}", start, start + len, c)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        self.unary("slice_cols", Op::SliceCols(self.id, start), Tensor::new(vec![r, len], data)?)
    }

    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        if start + c > total {
            return Err(shape_err("pad_cols", format!("{}+{} > {}", start, c, total)));
        }
        let mut out = Tensor::zeros(&[r, total]);
        for i in 0..r {
            out.row_mut(i)[start..start + c].copy_from_slice(x.row(i));
        }
        self.unary("pad_cols", Op::PadCols(self.id, start), out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("{}..{} of {}", start, start + len, r)));
        }
        let data = x.data()[start * c..(start + len) * c].to_vec();
        self.unary("slice_rows", Op::SliceRows(self.id, start), Tensor::new(vec![len, c], data)?)
    }

    pub fn pad_rows(&self, start: usize, total: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        if start + r > total {
            return Err(shape_err("pad_rows", format!("{}+{} > {}", start, r, total)));
        }
        let mut out = Tensor::zeros(&[total, c]);
        out.data_mut()[start * c..(start + r) * c].copy_from_slice(x.data());
        self.unary("pad_rows", Op::PadRows(self.id, start), out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self
            .value()
            .reshape(shape)
            .map_err(|_| shape_err("reshape", format!("{:?} -> {:?}", self.shape(), shape)))?;
        self.unary("reshape", Op::Reshape(self.id), v)
    }

    /// Entry `i` of the flattened tensor as a 0-dimensional tensor.
    pub fn index_flat(&self, i: usize) -> Result<Var<'g>> {
        let x = self.value();
        if i >= x.numel() {
            return Err(shape_err("index", format!("{} of {}", i, x.numel())));
        }
        self.unary("index", Op::IndexFlat(self.id, i), Tensor::scalar(x.data()[i]))
    }

    fn one_hot(&self, i: usize, shape: &[usize]) -> Result<Var<'g>> {
        let mut out = Tensor::zeros(shape);
        out.data_mut()[i] = self.value().data()[0];
        self.unary("one_hot", Op::OneHot(self.id, i), out)
    }

    /// Constant copy of this node: gradients do not flow through it.
    pub fn detach(&self) -> Result<Var<'g>> {
        self.graph.constant_arc(self.value())
    }

    /// Log-softmax over the trailing dimension of a `[r, c]` tensor.
    pub fn log_softmax_rows(&self) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let maxes: Vec<f64> = (0..r)
            .map(|i| x.row(i).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
            .collect();
        let shift = self.graph.constant(Tensor::new(vec![r, 1], maxes)?)?.broadcast_col(c)?;
        let shifted = self.sub(shift)?;
        let lse = shifted.exp()?.sum_rows()?.log()?.broadcast_col(c)?;
        shifted.sub(lse)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
