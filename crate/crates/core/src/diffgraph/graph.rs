//! Dynamic computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Index of a trainable tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

static EMPTY_PARAMS: ParamSet = ParamSet {
    names: Vec::new(),
    tensors: Vec::new(),
};

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Affine { x: Var, w: Var, b: Option<Var> },
    Activation(Var, Nonlinearity),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    PairScores { a: Var, b: Var, na: usize, nb: usize, scale: f64 },
    PairWeightedSum { w: Var, v: Var, na: usize, nb: usize },
    Gather { x: Var, idx: Vec<usize> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
}

enum Value<'p> {
    Borrowed(&'p Tensor),
    Owned(Tensor),
}

struct Node<'p> {
    op: Op,
    value: Value<'p>,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph::with_params(&EMPTY_PARAMS)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamSet) -> Self {
        Self {
            params,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf; its gradient is available through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Node for a trainable tensor. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value: Value::Borrowed(self.params.get(id)),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// `weight · x + bias` applied to every row of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.shape().len() != 2 || xt.cols() != wt.shape()[1] {
            return Err(shape_err("affine", wt, xt));
        }
        let (out, inp) = (wt.shape()[0], wt.shape()[1]);
        let rows = xt.rows();
        let mut y = vec![0.0; rows * out];
        gemm(rows, inp, out, xt.data(), inp, 1, wt.data(), 1, inp, 0.0, &mut y);
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != out {
                return Err(shape_err("affine bias", wt, bt));
            }
            for r in 0..rows {
                for (yv, bv) in y[r * out..(r + 1) * out].iter_mut().zip(bt.data()) {
                    *yv += bv;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Op::Affine { x, w, b }, Tensor::new(shape, y)?, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Nonlinearity) -> Var {
        let y = match kind {
            Nonlinearity::Tanh => self.value(x).map(f64::tanh),
            Nonlinearity::Relu => self.value(x).map(|v| v.max(0.0)),
        };
        let rg = self.rg(x);
        self.push(Op::Activation(x, kind), y, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Nonlinearity::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Nonlinearity::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(Op::Exp(x), y, rg)
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err(name, at, bt));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(at.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), y, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), y, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), y, rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_with(a, b, "minimum", f64::min)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Minimum(a, b), y, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(Op::Scale(x, c), y, rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let y = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(Op::Clamp { x, lo, hi }, y, rg)
    }

    /// Concatenate along the last axis; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::argument("concat of zero tensors"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = self.value(first).shape().to_vec();
        if shape.is_empty() {
            shape.push(cols);
        } else {
            *shape.last_mut().unwrap() = cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::new(shape, data)?, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), y, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax along the last axis where `mask[i] == false` entries get
    /// probability exactly zero. A fully masked row yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let xt = self.value(x);
        if xt.is_empty() || xt.cols() == 0 {
            return Err(Error::argument("softmax of an empty vector"));
        }
        let cols = xt.cols();
        let mut y = vec![0.0; xt.len()];
        for r in 0..xt.rows() {
            let row = xt.row(r);
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = &mut y[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if keep(j) {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            for v in out.iter_mut() {
                *v /= total;
            }
        }
        let y = Tensor::new(xt.shape().to_vec(), y)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax(x), y, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.is_empty() || xt.cols() == 0 {
            return Err(Error::argument("log_softmax of an empty vector"));
        }
        let cols = xt.cols();
        let mut y = Vec::with_capacity(xt.len());
        for r in 0..xt.rows() {
            let row = xt.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            y.extend(row.iter().map(|v| v - lse));
        }
        debug_assert_eq!(y.len(), xt.rows() * cols);
        let y = Tensor::new(xt.shape().to_vec(), y)?;
        let rg = self.rg(x);
        Ok(self.push(Op::LogSoftmax(x), y, rg))
    }

    /// Grouped dot products. `a` has `T·na` rows and `b` has `T·nb` rows of
    /// the same width; the result has `T·na` rows of `nb` scores, where
    /// `out[t·na + i][j] = scale · a[t·na + i] · b[t·nb + j]`.
    pub fn pair_scores(&mut self, a: Var, b: Var, na: usize, nb: usize, scale: f64) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if na == 0 || nb == 0 || at.cols() != bt.cols() || at.rows() % na != 0 {
            return Err(shape_err("pair_scores", at, bt));
        }
        let groups = at.rows() / na;
        if bt.rows() != groups * nb {
            return Err(shape_err("pair_scores", at, bt));
        }
        let d = at.cols();
        let mut y = vec![0.0; groups * na * nb];
        for t in 0..groups {
            for i in 0..na {
                let ar = at.row(t * na + i);
                for j in 0..nb {
                    let br = bt.row(t * nb + j);
                    let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                    y[(t * na + i) * nb + j] = scale * dot;
                }
            }
        }
        debug_assert_eq!(d, bt.cols());
        let rg = self.rg(a) || self.rg(b);
        let y = Tensor::matrix(groups * na, nb, y)?;
        Ok(self.push(Op::PairScores { a, b, na, nb, scale }, y, rg))
    }

    /// Grouped weighted sums: `out[t·na + i] = Σ_j w[t·na + i][j] · v[t·nb + j]`.
    pub fn pair_weighted_sum(&mut self, w: Var, v: Var, na: usize, nb: usize) -> Result<Var> {
        let (wt, vt) = (self.value(w), self.value(v));
        if na == 0 || nb == 0 || wt.cols() != nb || wt.rows() % na != 0 {
            return Err(shape_err("pair_weighted_sum", wt, vt));
        }
        let groups = wt.rows() / na;
        if vt.rows() != groups * nb {
            return Err(shape_err("pair_weighted_sum", wt, vt));
        }
        let d = vt.cols();
        let mut y = vec![0.0; groups * na * d];
        for t in 0..groups {
            for i in 0..na {
                let wr = wt.row(t * na + i);
                let out = &mut y[(t * na + i) * d..(t * na + i + 1) * d];
                for (j, &wj) in wr.iter().enumerate() {
                    if wj == 0.0 {
                        continue;
                    }
                    for (o, x) in out.iter_mut().zip(vt.row(t * nb + j)) {
                        *o += wj * x;
                    }
                }
            }
        }
        let rg = self.rg(w) || self.rg(v);
        let y = Tensor::matrix(groups * na, d, y)?;
        Ok(self.push(Op::PairWeightedSum { w, v, na, nb }, y, rg))
    }

    /// Picks `x[r][idx[r]]` for every row.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xt = self.value(x);
        if idx.len() != xt.rows() || idx.iter().any(|&i| i >= xt.cols()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: xt.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let y: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| xt.row(r)[c]).collect();
        let rg = self.rg(x);
        Ok(self.push(Op::Gather { x, idx }, Tensor::vector(y), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), y, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(x);
        self.push(Op::Mean(x), y, rg)
    }

    /// Sum along the last axis; `[R, C] -> [R]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Op::SumLast(x), Tensor::vector(y), rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::argument(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(root) {
            grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            node_grads: grads,
            param_nodes: self.param_nodes.clone(),
            param_shapes: self.params.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = self.value(Var(idx));
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Affine { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (out, inp) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.rows();
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * inp];
                    gemm(rows, out, inp, g.data(), out, 1, wt.data(), inp, 1, 0.0, &mut dx);
                    let dx = Tensor::new(xt.shape().to_vec(), dx).unwrap();
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; out * inp];
                    gemm(out, rows, inp, g.data(), 1, out, xt.data(), inp, 1, 0.0, &mut dw);
                    let dw = Tensor::new(wt.shape().to_vec(), dw).unwrap();
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; out];
                        for r in 0..rows {
                            for (d, gv) in db.iter_mut().zip(g.row(r)) {
                                *d += gv;
                            }
                        }
                        let db = Tensor::new(self.value(*b).shape().to_vec(), db).unwrap();
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Activation(x, kind) => {
                let dx: Vec<f64> = match kind {
                    Nonlinearity::Tanh => g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect(),
                    Nonlinearity::Relu => g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                };
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Exp(x) => {
                let dx = g.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(at.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
                self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), db).unwrap());
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::Concat(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let pt = self.value(p);
                    let c = pt.cols();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(pt.len());
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(pt.shape().to_vec(), dp).unwrap());
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(&shape).unwrap());
            }
            Op::Softmax(x) => {
                let cols = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::LogSoftmax(x) => {
                let cols = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cols {
                        dx[r * cols + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::PairScores { a, b, na, nb, scale } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let d = at.cols();
                let groups = at.rows() / na;
                let mut da = vec![0.0; at.len()];
                let mut db = vec![0.0; bt.len()];
                for t in 0..groups {
                    for i in 0..*na {
                        let ra = t * na + i;
                        for j in 0..*nb {
                            let rb = t * nb + j;
                            let gv = scale * g.data()[ra * nb + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                da[ra * d + k] += gv * bt.data()[rb * d + k];
                                db[rb * d + k] += gv * at.data()[ra * d + k];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(at.shape().to_vec(), da).unwrap());
                self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), db).unwrap());
            }
            Op::PairWeightedSum { w, v, na, nb } => {
                let (wt, vt) = (self.value(*w), self.value(*v));
                let d = vt.cols();
                let groups = wt.rows() / na;
                let mut dw = vec![0.0; wt.len()];
                let mut dv = vec![0.0; vt.len()];
                for t in 0..groups {
                    for i in 0..*na {
                        let ra = t * na + i;
                        let gr = &g.data()[ra * d..(ra + 1) * d];
                        for j in 0..*nb {
                            let rb = t * nb + j;
                            let vr = vt.row(rb);
                            dw[ra * nb + j] = gr.iter().zip(vr).map(|(x, y)| x * y).sum();
                            let wj = wt.data()[ra * nb + j];
                            if wj != 0.0 {
                                for (dvk, gk) in dv[rb * d..(rb + 1) * d].iter_mut().zip(gr) {
                                    *dvk += wj * gk;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *w, Tensor::new(wt.shape().to_vec(), dw).unwrap());
                self.accumulate(grads, *v, Tensor::new(vt.shape().to_vec(), dv).unwrap());
            }
            Op::Gather { x, idx } => {
                let xt = self.value(*x);
                let cols = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * cols + c] += g.data()[r];
                }
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx).unwrap());
            }
            Op::Clamp { x, lo, hi } => {
                let xt = self.value(*x);
                let dx = g
                    .data()
                    .iter()
                    .zip(xt.data())
                    .map(|(gv, xv)| if xv > lo && xv < hi { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx).unwrap());
            }
            Op::Minimum(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; at.len()];
                let mut db = vec![0.0; bt.len()];
                for i in 0..at.len() {
                    if at.data()[i] <= bt.data()[i] {
                        da[i] = g.data()[i];
                    } else {
                        db[i] = g.data()[i];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(at.shape().to_vec(), da).unwrap());
                self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), db).unwrap());
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Mean(x) => {
                let xt = self.value(*x);
                let v = g.item() / xt.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xt.shape(), v));
            }
            Op::SumLast(x) => {
                let xt = self.value(*x);
                let cols = xt.cols();
                let dx = (0..xt.len()).map(|i| g.data()[i / cols]).collect();
                self.accumulate(grads, *x, Tensor::new(xt.shape().to_vec(), dx).unwrap());
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    param_nodes: Vec<Option<Var>>,
    param_shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` is unreachable.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        self.node_grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        self.param_nodes[id.0]
            .and_then(|v| self.node_grads[v.0].clone())
            .unwrap_or_else(|| Tensor::zeros(&self.param_shapes[id.0]))
    }

    /// One gradient per parameter, in [`ParamSet`] order.
    pub fn into_param_grads(mut self) -> Vec<Tensor> {
        let param_nodes = std::mem::take(&mut self.param_nodes);
        param_nodes
            .iter()
            .zip(&self.param_shapes)
            .map(|(node, shape)| {
                node.and_then(|v| self.node_grads[v.0].take())
                    .unwrap_or_else(|| Tensor::zeros(shape))
            })
            .collect()
    }
}
