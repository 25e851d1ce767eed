use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::kernels::{self, gemm};
use super::param::{ParamId, Parameter};
use super::{AutodiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    /// Softmax over the last dimension.
    Softmax,
    Identity,
}

impl Activation {
    /// Applies the activation in place on rows of width `d`.
    pub fn apply(self, data: &mut [f64], d: usize) {
        match self {
            Activation::Relu => data.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => data.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Sigmoid => data.iter_mut().for_each(|v| *v = kernels::sigmoid(*v)),
            Activation::Softplus => data.iter_mut().for_each(|v| *v = kernels::softplus(*v)),
            Activation::Softmax => kernels::softmax_rows(data, d),
            Activation::Identity => {}
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Affine { x: usize, w: usize, b: usize },
    Act(Activation, usize),
    LogSoftmax(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clamp(usize, f64, f64),
    SumAll(usize),
    SumLast(usize),
    Concat(usize, usize),
    Gather(usize, Vec<usize>),
    SmoothL1 { pred: usize, target: Vec<f64>, beta: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds the recorded gradient (if any) into `param.grad`.
    pub fn accumulate_into(&self, param: &mut Parameter) {
        if let Some(g) = self.by_param.get(&param.id()) {
            param
                .grad_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(acc, v)| *acc += v);
        }
    }
}

/// Wengert list for reverse-mode differentiation. Single use: `backward`
/// consumes it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A constant input; gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a new constant node (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Registers a trainable parameter. Registering the same parameter twice
    /// returns the same node, so gradients from every use are summed.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&i) = self.params.get(&p.id()) {
            return Var(i);
        }
        let v = self.push(p.value().clone(), Op::Param, true);
        self.params.insert(p.id(), v.0);
        v
    }

    /// `x·w + b` with `x: [B×I]`, `w: [I×O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(AutodiffError::Shape(format!(
                "affine: input {:?}, weights {:?}, bias {:?}",
                xs, ws, bs
            )));
        }
        let (rows, i, o) = (xs[0], ws[0], ws[1]);
        let out = kernels::affine(
            self.nodes[x.0].value.data(),
            rows,
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            i,
            o,
        );
        let rg = self.rg(x.0) || self.rg(w.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::new(vec![rows, o], out)?,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let mut value = self.nodes[x.0].value.clone();
        let d = value.last_dim();
        kind.apply(value.data_mut(), d);
        let rg = self.rg(x.0);
        self.push(value, Op::Act(kind, x.0), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        let d = value.last_dim();
        kernels::log_softmax_rows(value.data_mut(), d);
        let rg = self.rg(x.0);
        self.push(value, Op::LogSoftmax(x.0), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        value.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(x.0);
        self.push(value, op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x.0))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x.0, lo, hi))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(AutodiffError::Shape(format!(
                "{name}: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last dimension, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let value = &self.nodes[x.0].value;
        let d = value.last_dim();
        let data: Vec<f64> = value.data().chunks(d.max(1)).map(|r| r.iter().sum()).collect();
        let mut shape = value.shape().to_vec();
        shape.pop();
        let out = Tensor::new(shape, data).expect("sum_last shape");
        let rg = self.rg(x.0);
        self.push(out, Op::SumLast(x.0), rg)
    }

    /// Concatenates two `[B×·]` matrices along the last dimension.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.rows() != vb.rows() {
            return Err(AutodiffError::Shape(format!(
                "concat: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (da, db) = (va.last_dim(), vb.last_dim());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Tensor::new(vec![va.rows(), da + db], data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Concat(a.0, b.0), rg))
    }

    /// Picks `x[r, idx[r]]` for every row of a `[B×D]` matrix.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let v = &self.nodes[x.0].value;
        let d = v.last_dim();
        if v.shape().len() != 2 || v.rows() != idx.len() || idx.iter().any(|&i| i >= d) {
            return Err(AutodiffError::Shape(format!(
                "gather: {:?} with {} indices",
                v.shape(),
                idx.len()
            )));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| v.row(r)[i]).collect();
        let out = Tensor::vector(data);
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::Gather(x.0, idx.to_vec()), rg))
    }

    /// Element-wise smooth-L1 (Huber) loss against a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], beta: f64) -> Result<Var, AutodiffError> {
        let v = &self.nodes[pred.0].value;
        if v.len() != target.len() {
            return Err(AutodiffError::Shape(format!(
                "smooth_l1: {} predictions vs {} targets",
                v.len(),
                target.len()
            )));
        }
        let data = v
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| crate::objectives::smooth_l1(*p, *t, beta))
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(pred.0);
        Ok(self.push(
            out,
            Op::SmoothL1 {
                pred: pred.0,
                target: target.to_vec(),
                beta,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        self.consumed = true;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        if let Some(i) = self.nodes[..=loss.0].iter().position(|n| !n.value.is_finite()) {
            return Err(AutodiffError::NumericInstability { node: i });
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NumericInstability { node: i });
            }
            match &self.nodes[i].op {
                Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                _ => self.propagate(i, &g, &mut grads),
            }
        }

        let mut out = Gradients::default();
        for (id, &i) in &self.params {
            if let Some(g) = grads[i].take() {
                out.by_param.insert(*id, g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (rows, inp, out) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                if self.rg(*x) {
                    let acc = slot(grads, *x, xv.len());
                    gemm(rows, out, inp, g, false, wv.data(), true, 1.0, acc);
                }
                if self.rg(*w) {
                    let acc = slot(grads, *w, wv.len());
                    gemm(inp, rows, out, xv.data(), true, g, false, 1.0, acc);
                }
                if self.rg(*b) {
                    let acc = slot(grads, *b, out);
                    for row in g.chunks(out) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Act(kind, x) => {
                let xv = self.nodes[*x].value.data();
                let d = node.value.last_dim();
                let acc = slot(grads, *x, xv.len());
                match kind {
                    Activation::Relu => {
                        for k in 0..g.len() {
                            if xv[k] > 0.0 {
                                acc[k] += g[k];
                            }
                        }
                    }
                    Activation::Tanh => {
                        for k in 0..g.len() {
                            acc[k] += g[k] * (1.0 - y[k] * y[k]);
                        }
                    }
                    Activation::Sigmoid => {
                        for k in 0..g.len() {
                            acc[k] += g[k] * y[k] * (1.0 - y[k]);
                        }
                    }
                    Activation::Softplus => {
                        for k in 0..g.len() {
                            acc[k] += g[k] * kernels::sigmoid(xv[k]);
                        }
                    }
                    Activation::Softmax => {
                        for ((gr, yr), ar) in g.chunks(d).zip(y.chunks(d)).zip(acc.chunks_mut(d)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for k in 0..d {
                                ar[k] += yr[k] * (gr[k] - dot);
                            }
                        }
                    }
                    Activation::Identity => {
                        acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = node.value.last_dim();
                let acc = slot(grads, *x, y.len());
                for ((gr, yr), ar) in g.chunks(d).zip(y.chunks(d)).zip(acc.chunks_mut(d)) {
                    let total: f64 = gr.iter().sum();
                    for k in 0..d {
                        ar[k] += gr[k] - yr[k].exp() * total;
                    }
                }
            }
            Op::Exp(x) => {
                let acc = slot(grads, *x, y.len());
                for k in 0..g.len() {
                    acc[k] += g[k] * y[k];
                }
            }
            Op::Ln(x) => {
                let xv = self.nodes[*x].value.data();
                let acc = slot(grads, *x, y.len());
                for k in 0..g.len() {
                    acc[k] += g[k] / xv[k];
                }
            }
            Op::Square(x) => {
                let xv = self.nodes[*x].value.data();
                let acc = slot(grads, *x, y.len());
                for k in 0..g.len() {
                    acc[k] += 2.0 * g[k] * xv[k];
                }
            }
            Op::Scale(x, c) => {
                let acc = slot(grads, *x, y.len());
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v * c);
            }
            Op::AddScalar(x) => {
                let acc = slot(grads, *x, y.len());
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.nodes[*x].value.data();
                let acc = slot(grads, *x, y.len());
                for k in 0..g.len() {
                    if xv[k] >= *lo && xv[k] <= *hi {
                        acc[k] += g[k];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let acc = slot(grads, *a, y.len());
                    acc.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
                if self.rg(*b) {
                    let acc = slot(grads, *b, y.len());
                    acc.iter_mut().zip(g).for_each(|(s, v)| *s += sign * v);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.nodes[*b].value.data();
                    let acc = slot(grads, *a, y.len());
                    for k in 0..g.len() {
                        acc[k] += g[k] * bv[k];
                    }
                }
                if self.rg(*b) {
                    let av = self.nodes[*a].value.data();
                    let acc = slot(grads, *b, y.len());
                    for k in 0..g.len() {
                        acc[k] += g[k] * av[k];
                    }
                }
            }
            Op::SumAll(x) => {
                let n = self.nodes[*x].value.len();
                let acc = slot(grads, *x, n);
                acc.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::SumLast(x) => {
                let xv = &self.nodes[*x].value;
                let d = xv.last_dim();
                let acc = slot(grads, *x, xv.len());
                for (r, row) in acc.chunks_mut(d).enumerate() {
                    row.iter_mut().for_each(|a| *a += g[r]);
                }
            }
            Op::Concat(a, b) => {
                let (da, db) = (
                    self.nodes[*a].value.last_dim(),
                    self.nodes[*b].value.last_dim(),
                );
                let rows = node.value.rows();
                if self.rg(*a) {
                    let acc = slot(grads, *a, rows * da);
                    for r in 0..rows {
                        for k in 0..da {
                            acc[r * da + k] += g[r * (da + db) + k];
                        }
                    }
                }
                if self.rg(*b) {
                    let acc = slot(grads, *b, rows * db);
                    for r in 0..rows {
                        for k in 0..db {
                            acc[r * db + k] += g[r * (da + db) + da + k];
                        }
                    }
                }
            }
            Op::Gather(x, idx) => {
                let xv = &self.nodes[*x].value;
                let d = xv.last_dim();
                let acc = slot(grads, *x, xv.len());
                for (r, &k) in idx.iter().enumerate() {
                    acc[r * d + k] += g[r];
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                let pv = self.nodes[*pred].value.data();
                let acc = slot(grads, *pred, pv.len());
                for k in 0..g.len() {
                    let diff = pv[k] - target[k];
                    let d = if diff.abs() < *beta {
                        diff / beta
                    } else {
                        diff.signum()
                    };
                    acc[k] += g[k] * d;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, n: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; n])
}
