//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::kernels::{self, log_softmax_row, sigmoid, softmax_row};
use super::params::{ParamId, ParameterSet};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Softplus(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy(Var, Tensor),
    LayerNorm(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A computation graph. Build it with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

fn expect_2d(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{op}: expected a 2-D operand, got {s:?}"))),
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for (row, o) in t.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        softmax_row(row, o);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is propagated past it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Gradient barrier: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Leaf bound to a parameter. Repeated calls with the same id share one
    /// node, so gradients from every use accumulate.
    pub fn param(&mut self, params: &ParameterSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    /// `[b, i] x [i, o] -> [b, o]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = expect_2d(self.value(a), "matmul")?;
        let (k2, n) = expect_2d(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: {:?} x {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    /// `[b, k] + [k]`, the bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = expect_2d(self.value(x), "add_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Shape(format!(
                "add_bias: {:?} + {:?}",
                self.value(x).shape(),
                self.value(bias).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a).same_shape(self.value(b), name)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.value(a).shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0) + kernels::exp(-v.abs()).ln_1p());
        self.push(out, Op::Softplus(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        kernels::silu_in_place(out.data_mut());
        self.push(out, Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// `[b, k] -> [b]`, summing each row.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = expect_2d(self.value(x), "sum_cols")?;
        let out: Vec<f64> = self.value(x).data().chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        let out = if c == 0 { vec![0.0; r] } else { out };
        Ok(self.push(Tensor::new(&[r], out)?, Op::SumCols(x)))
    }

    /// Softmax over the last axis of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        expect_2d(self.value(x), "softmax")?;
        let out = softmax(self.value(x));
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = expect_2d(self.value(x), "log_softmax")?;
        let mut out = self.value(x).clone();
        for (row, o) in self.value(x).data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            log_softmax_row(row, o);
        }
        Ok(self.push(out, Op::LogSoftmax(x)))
    }

    /// Per-row `-sum(target * log_softmax(logits))`, `[b, k] -> [b]`.
    /// The target is a constant probability table.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let (r, c) = expect_2d(self.value(logits), "cross_entropy")?;
        self.value(logits).same_shape(target, "cross_entropy")?;
        let mut ls = vec![0.0; c];
        let mut out = Vec::with_capacity(r);
        for (row, t) in self.value(logits).data().chunks(c).zip(target.data().chunks(c)) {
            log_softmax_row(row, &mut ls);
            out.push(-t.iter().zip(&ls).map(|(p, l)| p * l).sum::<f64>());
        }
        Ok(self.push(Tensor::new(&[r], out)?, Op::CrossEntropy(logits, target.clone())))
    }

    /// Zero-mean, unit-variance normalisation over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = expect_2d(self.value(x), "layer_norm")?;
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(r);
        kernels::layer_norm_rows(out.data_mut(), c, Some(&mut inv_std));
        Ok(self.push(out, Op::LayerNorm(x, inv_std)))
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = expect_2d(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = expect_2d(self.value(p), "concat_cols")?;
            if r != rows {
                let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
                return Err(Error::Shape(format!("concat_cols: row counts differ in {shapes:?}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = expect_2d(self.value(x), "slice_cols")?;
        if start > end || end > c {
            return Err(Error::Shape(format!(
                "slice_cols: {start}..{end} out of range for {:?}",
                self.value(x).shape()
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * (end - start));
        for row in 0..r {
            out.extend_from_slice(&src[row * c + start..row * c + end]);
        }
        Ok(self.push(Tensor::new(&[r, end - start], out)?, Op::SliceCols(x, start)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar `loss`; parameter gradients are added
    /// into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, delta: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut da);
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut db);
                    acc(*a, Tensor::new(&[m, k], da)?);
                    acc(*b, Tensor::new(&[k, n], db)?);
                }
                Op::AddBias(x, b) => {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(&[c], db)?);
                    acc(*x, g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |g, y| g * y);
                    let gb = elementwise(&g, self.value(*a), |g, x| g * x);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
                Op::AddScalar(x) => acc(*x, g),
                Op::Tanh(x) => acc(*x, elementwise(&g, &node.value, |g, y| g * (1.0 - y * y))),
                Op::Softplus(x) => acc(*x, elementwise(&g, self.value(*x), |g, x| g * sigmoid(x))),
                Op::Silu(x) => acc(
                    *x,
                    elementwise(&g, self.value(*x), |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    }),
                ),
                Op::Exp(x) => acc(*x, elementwise(&g, &node.value, |g, y| g * y)),
                Op::Log(x) => acc(*x, elementwise(&g, self.value(*x), |g, x| g / x)),
                Op::Sum(x) => acc(*x, Tensor::full(self.value(*x).shape(), g.item())),
                Op::Mean(x) => {
                    let n = self.value(*x).len() as f64;
                    acc(*x, Tensor::full(self.value(*x).shape(), g.item() / n))
                }
                Op::SumCols(x) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut d = Vec::with_capacity(xv.len());
                    for &gr in g.data() {
                        d.extend(std::iter::repeat_n(gr, c));
                    }
                    acc(*x, Tensor::new(xv.shape(), d)?);
                }
                Op::Softmax(x) => {
                    let c = node.value.cols();
                    let mut d = g.clone();
                    for (dr, yr) in d.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (dv, y) in dr.iter_mut().zip(yr) {
                            *dv = y * (*dv - dot);
                        }
                    }
                    acc(*x, d);
                }
                Op::LogSoftmax(x) => {
                    let c = node.value.cols();
                    let mut d = g.clone();
                    for (dr, yr) in d.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                        let total: f64 = dr.iter().sum();
                        for (dv, y) in dr.iter_mut().zip(yr) {
                            *dv -= kernels::exp(*y) * total;
                        }
                    }
                    acc(*x, d);
                }
                Op::CrossEntropy(logits, target) => {
                    let lv = self.value(*logits);
                    let c = lv.cols();
                    let mut d = softmax(lv);
                    for ((dr, tr), gr) in d.data_mut().chunks_mut(c).zip(target.data().chunks(c)).zip(g.data()) {
                        let mass: f64 = tr.iter().sum();
                        for (dv, t) in dr.iter_mut().zip(tr) {
                            *dv = gr * (*dv * mass - t);
                        }
                    }
                    acc(*logits, d);
                }
                Op::LayerNorm(x, inv_std) => {
                    let c = node.value.cols();
                    let mut d = g.clone();
                    for ((dr, yr), is) in d.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)).zip(inv_std) {
                        let mean_g = dr.iter().sum::<f64>() / c as f64;
                        let mean_gy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (dv, y) in dr.iter_mut().zip(yr) {
                            *dv = is * (*dv - mean_g - y * mean_gy);
                        }
                    }
                    acc(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, Tensor::new(&[rows, w], d)?);
                        offset += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let (rows, c) = (xv.rows(), xv.cols());
                    let w = g.cols();
                    let mut d = vec![0.0; rows * c];
                    for r in 0..rows {
                        d[r * c + start..r * c + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    acc(*x, Tensor::new(&[rows, c], d)?);
                }
                Op::Reshape(x) => acc(*x, g.reshaped(self.value(*x).shape())?),
            }
        }
        Ok(())
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape(), data).expect("same shape")
}
