//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s during the
//! forward pass. [`Graph::backward`] replays the tape in reverse and returns
//! the gradient of a scalar loss with respect to every node that requires
//! one. Nodes created with [`Graph::constant`] (and everything computed only
//! from constants) are skipped during the reverse sweep.
//!
//! A graph is one single-writer episode: build it, run backward, read the
//! gradients, drop it.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::array::{matmul_into, softmax_slice, Tensor};
use crate::error::{Error, Result};

/// Floor added inside logarithms so that exact zeros stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Softmax { input: usize, axis: usize },
    LogFloor { input: usize, eta: f64 },
    Reshape(usize),
    Sum(usize),
    SelectRows { input: usize, rows: Vec<usize> },
    VecMat(usize, usize),
    PickRows { input: usize, index: Vec<usize> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward/backward episode.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Gradients produced by one call to [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` requires one
    /// and the loss depends on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros when the loss does not
    /// depend on `var`.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Differentiable leaf.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
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
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn derived(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = parents.iter().any(|&p| self.requires(p));
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::Usage("loss belongs to a different graph".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let want = |p: usize| nodes[p].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if want(*a) {
                        accumulate(&mut grads, *a, g.matmul(&bv.transpose()?)?);
                    }
                    if want(*b) {
                        accumulate(&mut grads, *b, av.transpose()?.matmul(&g)?);
                    }
                }
                Op::AddBias(a, b) => {
                    if want(*b) {
                        let m = nodes[*b].value.len();
                        let mut gb = vec![0.0; m];
                        for row in g.data().chunks(m) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        let shape = nodes[*b].value.shape().to_vec();
                        accumulate(&mut grads, *b, Tensor::new(shape, gb)?);
                    }
                    if want(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::Add(a, b) => {
                    if want(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if want(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if want(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if want(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if want(*a) {
                        accumulate(&mut grads, *a, g.zip_map(bv, |x, y| x * y)?);
                    }
                    if want(*b) {
                        accumulate(&mut grads, *b, g.zip_map(av, |x, y| x * y)?);
                    }
                }
                Op::Scale(a, c) => {
                    if want(*a) {
                        let c = *c;
                        accumulate(&mut grads, *a, g.map(|v| v * c));
                    }
                }
                Op::Relu(a) => {
                    if want(*a) {
                        let gi = g.zip_map(&nodes[*a].value, |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                        accumulate(&mut grads, *a, gi);
                    }
                }
                Op::Softmax { input, axis } => {
                    if want(*input) {
                        let y = &node.value;
                        let (outer, len, inner) = axis_strides(y.shape(), *axis);
                        let mut gi = vec![0.0; y.len()];
                        let (yd, gd) = (y.data(), g.data());
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let dot: f64 = (0..len)
                                    .map(|k| gd[base + k * inner] * yd[base + k * inner])
                                    .sum();
                                for k in 0..len {
                                    let at = base + k * inner;
                                    gi[at] = yd[at] * (gd[at] - dot);
                                }
                            }
                        }
                        accumulate(&mut grads, *input, Tensor::new(y.shape().to_vec(), gi)?);
                    }
                }
                Op::LogFloor { input, eta } => {
                    if want(*input) {
                        let eta = *eta;
                        let gi = g.zip_map(&nodes[*input].value, |gv, x| gv / (x + eta))?;
                        accumulate(&mut grads, *input, gi);
                    }
                }
                Op::Reshape(a) => {
                    if want(*a) {
                        accumulate(&mut grads, *a, g.reshape(nodes[*a].value.shape())?);
                    }
                }
                Op::Sum(a) => {
                    if want(*a) {
                        let gv = g.data()[0];
                        accumulate(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), gv));
                    }
                }
                Op::SelectRows { input, rows } => {
                    if want(*input) {
                        let src = &nodes[*input].value;
                        let mut gi = Tensor::zeros(src.shape());
                        for (k, &r) in rows.iter().enumerate() {
                            for (acc, &v) in gi.row_mut(r).iter_mut().zip(g.row(k)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *input, gi);
                    }
                }
                Op::VecMat(p, t) => {
                    let (pv, tv) = (&nodes[*p].value, &nodes[*t].value);
                    let (n, c) = (pv.shape()[0], pv.shape()[1]);
                    if want(*p) {
                        let mut gp = vec![0.0; n * c];
                        for s in 0..n {
                            let gr = g.row(s);
                            let tm = tv.row(s);
                            for i in 0..c {
                                gp[s * c + i] = (0..c).map(|j| tm[i * c + j] * gr[j]).sum();
                            }
                        }
                        accumulate(&mut grads, *p, Tensor::new(vec![n, c], gp)?);
                    }
                    if want(*t) {
                        let mut gt = vec![0.0; n * c * c];
                        for s in 0..n {
                            let gr = g.row(s);
                            let pr = pv.row(s);
                            for i in 0..c {
                                for j in 0..c {
                                    gt[s * c * c + i * c + j] = pr[i] * gr[j];
                                }
                            }
                        }
                        accumulate(&mut grads, *t, Tensor::new(vec![n, c, c], gt)?);
                    }
                }
                Op::PickRows { input, index } => {
                    if want(*input) {
                        let src = &nodes[*input].value;
                        let c = src.shape()[2];
                        let mut gi = Tensor::zeros(src.shape());
                        for (s, &k) in index.iter().enumerate() {
                            let dst = &mut gi.row_mut(s)[k * c..(k + 1) * c];
                            for (acc, &v) in dst.iter_mut().zip(g.row(s)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *input, gi);
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// `(outer, len, inner)` strides for reducing over `axis` of `shape`.
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::Usage("operands belong to different graphs".into()))
        }
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(a.data(), b.data(), &mut out, n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.graph.derived(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&bias)?;
        let (a, b) = (self.value(), bias.value());
        if a.rank() != 2 || b.rank() != 1 || a.shape()[1] != b.len() {
            return Err(Error::dim("add_bias", a.shape(), b.shape()));
        }
        let mut out = a.as_ref().clone();
        for row in out.data_mut().chunks_mut(b.len()) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.graph.derived(out, Op::AddBias(self.id, bias.id), &[self.id, bias.id]))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.graph.derived(out, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.graph.derived(out, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.graph.derived(out, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let out = self.value().map(|v| v * c);
        self.graph.derived(out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().map(|v| v.max(0.0));
        self.graph.derived(out, Op::Relu(self.id), &[self.id])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let z = self.value();
        if axis >= z.rank() {
            return Err(Error::Usage(format!(
                "softmax axis {axis} out of range for shape {:?}",
                z.shape()
            )));
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (outer, len, inner) = axis_strides(z.shape(), axis);
        let mut out = vec![0.0; z.len()];
        let mut zs = vec![0.0; len];
        let mut ys = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for k in 0..len {
                    zs[k] = z.data()[base + k * inner];
                }
                softmax_slice(&zs, &mut ys);
                for k in 0..len {
                    out[base + k * inner] = ys[k];
                }
            }
        }
        let value = Tensor::new(z.shape().to_vec(), out)?;
        Ok(self.graph.derived(value, Op::Softmax { input: self.id, axis }, &[self.id]))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Result<Var<'g>> {
        let rank = self.value().rank();
        self.softmax(rank - 1)
    }

    /// `ln(x + eta)` elementwise.
    pub fn log_floor(self, eta: f64) -> Var<'g> {
        let out = self.value().map(|v| (v + eta).ln());
        self.graph.derived(out, Op::LogFloor { input: self.id, eta }, &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.derived(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(self) -> Var<'g> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.derived(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Gathers first-axis slices; repeated indices accumulate in backward.
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'g>> {
        let out = self.value().select_rows(rows)?;
        Ok(self.graph.derived(
            out,
            Op::SelectRows {
                input: self.id,
                rows: rows.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Batched row-vector times matrix: `p[n, C]`, `t[n, C, C]` gives
    /// `out[n, j] = sum_i p[n, i] * t[n, i, j]`.
    pub fn vec_mat(self, t: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&t)?;
        let (pv, tv) = (self.value(), t.value());
        let ok = pv.rank() == 2
            && tv.rank() == 3
            && tv.shape()[0] == pv.shape()[0]
            && tv.shape()[1] == pv.shape()[1]
            && tv.shape()[2] == pv.shape()[1];
        if !ok {
            return Err(Error::dim("vec_mat", pv.shape(), tv.shape()));
        }
        let (n, c) = (pv.shape()[0], pv.shape()[1]);
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            let pr = pv.row(s);
            let tm = tv.row(s);
            let orow = &mut out[s * c..(s + 1) * c];
            for i in 0..c {
                let w = pr[i];
                for j in 0..c {
                    orow[j] += w * tm[i * c + j];
                }
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.graph.derived(value, Op::VecMat(self.id, t.id), &[self.id, t.id]))
    }

    /// From a stack of matrices `t[n, C, C]`, picks row `index[s]` of
    /// matrix `s`, giving `[n, C]`.
    pub fn pick_rows(self, index: &[usize]) -> Result<Var<'g>> {
        let tv = self.value();
        if tv.rank() != 3 || tv.shape()[0] != index.len() {
            return Err(Error::dim("pick_rows", tv.shape(), &[index.len()]));
        }
        let (n, r, c) = (tv.shape()[0], tv.shape()[1], tv.shape()[2]);
        let mut out = Vec::with_capacity(n * c);
        for (s, &k) in index.iter().enumerate() {
            if k >= r {
                return Err(Error::Input(format!("row index {k} out of range for {r} rows")));
            }
            out.extend_from_slice(&tv.row(s)[k * c..(k + 1) * c]);
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.graph.derived(
            value,
            Op::PickRows {
                input: self.id,
                index: index.to_vec(),
            },
            &[self.id],
        ))
    }
}
