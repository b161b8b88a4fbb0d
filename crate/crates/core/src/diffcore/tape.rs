//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the indices of its inputs. [`Tape::backward`] walks the nodes in reverse
//! and returns a [`Gradients`] table indexed by [`Var`].

use super::param::Parameter;
use super::tensor::{affine_kernel, sigmoid, softmax, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Ln(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow { a: Var, row: Var },
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    StraightThrough(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    SoftCrossEntropy { logits: Var, target: Tensor, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter's current value as a differentiable leaf.
    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.value.clone())
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = affine_kernel(self.value(x), self.value(w), self.value(b))?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Affine { x, w, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Softmax over the last dimension, row by row.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 {
            return Err(Error::dims("softmax", xv.shape(), &[1]));
        }
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let s = softmax(xv.row(r));
            out.row_mut(r).copy_from_slice(&s);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let ng = self.ng(x);
        self.push(out, Op::Ln(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let ng = self.ng(x);
        self.push(out, Op::Abs(x), ng)
    }

    fn binary(&mut self, a: Var, b: Var, ctx: &'static str) -> Result<(Tensor, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dims(ctx, av.shape(), bv.shape()));
        }
        Ok((av.clone(), self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, ng) = self.binary(a, b, "add")?;
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.binary(a, b, "sub")?;
        let out = out.zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ng) = self.binary(a, b, "mul")?;
        let out = out.zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Multiplies every row of `a` by the vector `row` elementwise.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::MulRow { a, row }, ng))
    }

    /// Adds the vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow { a, row }, ng))
    }

    fn row_broadcast(
        &self,
        a: Var,
        row: Var,
        ctx: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, rv) = (self.value(a), self.value(row));
        if av.cols() != rv.len() {
            return Err(Error::dims(ctx, av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for r in 0..av.rows() {
            for (o, &m) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o = f(*o, m);
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Column means of a matrix, yielding a vector.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = Tensor::vector(self.value(a).column_means());
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Sums over the last dimension of a matrix, yielding a vector.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::vector((0..v.rows()).map(|r| v.row(r).iter().sum()).collect());
        let ng = self.ng(a);
        self.push(out, Op::SumLast(a), ng)
    }

    /// Concatenates flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        let mut ng = false;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            ng |= self.ng(p);
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::dims("straight_through", hard.shape(), self.value(soft).shape()));
        }
        let ng = self.ng(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), ng))
    }

    /// Mean negative log-likelihood of `labels` under row softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() {
            return Err(Error::dims("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let k = lv.cols();
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Index {
                    context: "cross_entropy label",
                    index: y,
                    bound: k,
                });
            }
            let row = lv.row(r);
            // lse - row[y] written as (m - row[y]) + ln1p(Σ_{i≠argmax} e^(x_i - m))
            // so confident rows keep full relative precision.
            let (am, m) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != am)
                .map(|(_, v)| (v - m).exp())
                .sum();
            loss += (m - row[y]) + rest.ln_1p();
            let p = softmax(row);
            probs.row_mut(r).copy_from_slice(&p);
        }
        let out = Tensor::scalar(loss / labels.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean cross-entropy against fixed target distributions (one per row).
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() {
            return Err(Error::dims("soft_cross_entropy", lv.shape(), target.shape()));
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (t, z) in target.row(r).iter().zip(row) {
                loss += t * (lse - z);
            }
            probs.row_mut(r).copy_from_slice(&softmax(row));
        }
        let out = Tensor::scalar(loss / lv.rows() as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, i_dim, o_dim) = (xv.rows(), wv.rows(), wv.cols());
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for r in 0..rows {
                        let gr = g.row(r);
                        let dxr = dx.row_mut(r);
                        for (i, d) in dxr.iter_mut().enumerate() {
                            let wrow = &wv.data()[i * o_dim..(i + 1) * o_dim];
                            *d = wrow.iter().zip(gr).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accum(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    let dwd = dw.data_mut();
                    for r in 0..rows {
                        let (xr, gr) = (xv.row(r), g.row(r));
                        for (i, &xi) in xr.iter().enumerate().take(i_dim) {
                            if xi == 0.0 {
                                continue;
                            }
                            let drow = &mut dwd[i * o_dim..(i + 1) * o_dim];
                            for (d, &gv) in drow.iter_mut().zip(gr) {
                                *d += xi * gv;
                            }
                        }
                    }
                    self.accum(grads, *w, dw);
                }
                if self.ng(*b) {
                    self.accum(grads, *b, Tensor::vector(g.column_sums()));
                }
            }
            Op::Relu(x) => {
                let d = self.value(*x).zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 });
                self.accum(grads, *x, d.expect("shape"));
            }
            Op::Sigmoid(x) => {
                let d = out.zip_map(g, |y, gv| gv * y * (1.0 - y));
                self.accum(grads, *x, d.expect("shape"));
            }
            Op::Softmax(x) => {
                let mut d = out.clone();
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accum(grads, *x, d);
            }
            Op::Ln(x) => {
                let d = self.value(*x).zip_map(g, |xv, gv| gv / xv);
                self.accum(grads, *x, d.expect("shape"));
            }
            Op::Abs(x) => {
                let d = self.value(*x).zip_map(g, |xv, gv| gv * sign(xv));
                self.accum(grads, *x, d.expect("shape"));
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = self.value(*b).zip_map(g, |bv, gv| bv * gv);
                    self.accum(grads, *a, d.expect("shape"));
                }
                if self.ng(*b) {
                    let d = self.value(*a).zip_map(g, |av, gv| av * gv);
                    self.accum(grads, *b, d.expect("shape"));
                }
            }
            Op::MulRow { a, row } => {
                let (av, rv) = (self.value(*a), self.value(*row));
                if self.ng(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for (dv, &m) in d.row_mut(r).iter_mut().zip(rv.data()) {
                            *dv *= m;
                        }
                    }
                    self.accum(grads, *a, d);
                }
                if self.ng(*row) {
                    let mut d = vec![0.0; rv.len()];
                    for r in 0..av.rows() {
                        for ((dv, &x), &gv) in d.iter_mut().zip(av.row(r)).zip(g.row(r)) {
                            *dv += x * gv;
                        }
                    }
                    self.accum(grads, *row, Tensor::vector(d));
                }
            }
            Op::AddRow { a, row } => {
                self.accum(grads, *a, g.clone());
                if self.ng(*row) {
                    self.accum(grads, *row, Tensor::vector(g.column_sums()));
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accum(grads, *a, Tensor::filled(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gv = g.data()[0] / av.len() as f64;
                self.accum(grads, *a, Tensor::filled(av.shape(), gv));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let rows = av.rows();
                let mut d = Tensor::zeros(av.shape());
                for r in 0..rows {
                    for (dv, &gv) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *dv = gv / rows as f64;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::SumLast(a) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let gv = g.data()[r];
                    d.row_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                self.accum(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    let slice = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    self.accum(grads, p, Tensor::new(pv.shape().to_vec(), slice).expect("shape"));
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accum(grads, *a, g.reshape(&shape).expect("shape"));
            }
            Op::StraightThrough(soft) => self.accum(grads, *soft, g.clone()),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.data()[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d.row_mut(r)[y] -= 1.0;
                }
                d.data_mut().iter_mut().for_each(|v| *v *= scale);
                self.accum(grads, *logits, d);
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let scale = g.data()[0] / probs.rows() as f64;
                let d = probs
                    .zip_map(target, |q, t| (q - t) * scale)
                    .expect("shape");
                self.accum(grads, *logits, d);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
