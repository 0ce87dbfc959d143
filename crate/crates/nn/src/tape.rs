//! Reverse-mode automatic differentiation over rank ≤ 2 tensors.
//!
//! Every operation appends a node to the [`Tape`]; node ids are handed out
//! in creation order, so the node list is already topologically sorted and a
//! single reverse sweep visits each node once.

use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Sin,
    Cos,
    Sqrt,
    Log,
    Exp,
    Softplus,
    Square,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(u, _) => match u {
                Unary::Neg => "neg",
                Unary::Tanh => "tanh",
                Unary::Sigmoid => "sigmoid",
                Unary::Sin => "sin",
                Unary::Cos => "cos",
                Unary::Sqrt => "sqrt",
                Unary::Log => "log",
                Unary::Exp => "exp",
                Unary::Softplus => "softplus",
                Unary::Square => "square",
            },
            Op::Binary(b, _, _) => match b {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Minimum(..) => "minimum",
            Op::Clamp(..) => "clamp",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameters of a [`ParamSet`] bound as differentiable leaves.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NnError::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Collect gradients for every bound parameter, named as in the source set.
    pub fn params(&self, bound: &Bound) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, var) in bound.iter() {
            out.insert(name, self.wrt(var)).expect("bound names are unique");
        }
        out
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(d: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if d.0 == 1 { 0 } else { r };
    let cc = if d.1 == 1 { 0 } else { c };
    rr * d.1 + cc
}

/// Sum a `(r, c)` gradient down to a broadcast input of dims `d`.
fn reduce_to(g: &Tensor, d: (usize, usize), shape: &[usize]) -> Tensor {
    let (r, c) = dims(g);
    if (r, c) == d {
        return Tensor::new(shape.to_vec(), g.data().to_vec()).expect("same size");
    }
    let mut out = vec![0.0; d.0 * d.1];
    for i in 0..r {
        for j in 0..c {
            out[bidx(d, i, j)] += g.data()[i * c + j];
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduced size")
}

/// `c (+)= op(a) · op(b)` with `op(a)` of size `m × k` and `op(b)` of size `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: slice lengths cover the strided m×k, k×n and m×n views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `tanh` through a single `exp`; within a few ulp of `f64::tanh` and
/// noticeably cheaper on the hot paths.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Bind parameters as constants (no gradient flows into them).
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), self.constant(t.clone())))
            .collect();
        Bound { vars }
    }

    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.nodes[v.0].value.is_finite() {
            Ok(())
        } else {
            Err(NnError::Numeric {
                node: v.0,
                op: self.nodes[v.0].op.name(),
            })
        }
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let value = match kind {
            Unary::Neg => x.map(|v| -v),
            Unary::Tanh => x.map(tanh),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Sin => x.map(f64::sin),
            Unary::Cos => x.map(f64::cos),
            Unary::Sqrt => x.map(f64::sqrt),
            Unary::Log => x.map(f64::ln),
            Unary::Exp => x.map(f64::exp),
            Unary::Softplus => x.map(softplus),
            Unary::Square => x.map(|v| v * v),
        };
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (da, db) = (dims(ta), dims(tb));
        let (r, c) = broadcast_shape(da, db).ok_or_else(|| {
            NnError::Dimension(format!(
                "cannot broadcast {:?} with {:?}",
                ta.shape(),
                tb.shape()
            ))
        })?;
        let (xa, xb) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let u = xa[bidx(da, i, j)];
                let v = xb[bidx(db, i, j)];
                out.push(match kind {
                    Binary::Add => u + v,
                    Binary::Sub => u - v,
                    Binary::Mul => u * v,
                    Binary::Div => u / v,
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v + k);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ((m, k), (k2, n)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(NnError::Dimension(format!(
                "matmul {:?} × {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.sum() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row sums: `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = dims(t);
        let out = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        self.push(
            Tensor::matrix(r, 1, out).expect("row sums"),
            Op::SumCols(a),
            rg,
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (r, c) = dims(t);
        if start > end || end > c {
            return Err(NnError::Dimension(format!(
                "column slice {start}..{end} of {:?}",
                t.shape()
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, w, out)?, Op::SliceCols(a, start, end), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|v| self.nodes[v.0].value.rows())
            .ok_or_else(|| NnError::Contract("concat of zero tensors".into()))?;
        let mut total = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != r {
                return Err(NnError::Dimension(format!(
                    "concat rows {} vs {}",
                    r,
                    t.rows()
                )));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row_slice(i));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::matrix(r, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Elementwise minimum of two equally shaped tensors; ties route the
    /// gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if dims(ta) != dims(tb) {
            return Err(NnError::Dimension(format!(
                "minimum {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (r, c) = dims(ta);
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x.min(*y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::Minimum(a, b), rg))
    }

    /// Clamp into `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NnError::Contract(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(NnError::Numeric {
                node: loss.0,
                op: self.nodes[loss.0].op.name(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !g.is_finite() {
                return Err(NnError::Numeric {
                    node: id,
                    op: node.op.name(),
                });
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                if !self.rg(*a) {
                    return Ok(());
                }
                let x = &self.nodes[a.0].value;
                let gd = g.data();
                let (xd, yd) = (x.data(), y.data());
                let out: Vec<f64> = (0..gd.len())
                    .map(|i| {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Tanh => 1.0 - yd[i] * yd[i],
                            Unary::Sigmoid => yd[i] * (1.0 - yd[i]),
                            Unary::Sin => xd[i].cos(),
                            Unary::Cos => -xd[i].sin(),
                            Unary::Sqrt => 0.5 / yd[i],
                            Unary::Log => 1.0 / xd[i],
                            Unary::Exp => yd[i],
                            Unary::Softplus => sigmoid(xd[i]),
                            Unary::Square => 2.0 * xd[i],
                        };
                        gd[i] * d
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), out)?);
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (da, db) = (dims(ta), dims(tb));
                let (r, c) = dims(y);
                let gd = g.data();
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let gv = gd[i * c + j];
                            ga.push(match kind {
                                Binary::Add | Binary::Sub => gv,
                                Binary::Mul => gv * tb.data()[bidx(db, i, j)],
                                Binary::Div => gv / tb.data()[bidx(db, i, j)],
                            });
                        }
                    }
                    let full = Tensor::matrix(r, c, ga)?;
                    self.accumulate(grads, *a, reduce_to(&full, da, ta.shape()));
                }
                if self.rg(*b) {
                    let mut gb = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let gv = gd[i * c + j];
                            let bv = tb.data()[bidx(db, i, j)];
                            gb.push(match kind {
                                Binary::Add => gv,
                                Binary::Sub => -gv,
                                Binary::Mul => gv * ta.data()[bidx(da, i, j)],
                                Binary::Div => -gv * ta.data()[bidx(da, i, j)] / (bv * bv),
                            });
                        }
                    }
                    let full = Tensor::matrix(r, c, gb)?;
                    self.accumulate(grads, *b, reduce_to(&full, db, tb.shape()));
                }
            }
            Op::Scale(a, k) => {
                let x = &self.nodes[a.0].value;
                let out = g.data().iter().map(|v| v * k).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), out)?);
            }
            Op::AddScalar(a) => {
                let x = &self.nodes[a.0].value;
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), g.data().to_vec())?);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ((m, k), (_, n)) = (dims(ta), dims(tb));
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let x = &self.nodes[a.0].value;
                let mut gv = g.data()[0];
                if matches!(node.op, Op::Mean(_)) {
                    gv /= x.len().max(1) as f64;
                }
                self.accumulate(grads, *a, Tensor::full(x.shape(), gv));
            }
            Op::SumCols(a) => {
                let x = &self.nodes[a.0].value;
                let (r, c) = dims(x);
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    out.extend(std::iter::repeat(g.data()[i]).take(c));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), out)?);
            }
            Op::SliceCols(a, start, end) => {
                let x = &self.nodes[a.0].value;
                let (r, c) = dims(x);
                let w = end - start;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), out)?);
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let r = y.rows();
                let mut offset = 0;
                for p in parts {
                    let x = &self.nodes[p.0].value;
                    let w = x.cols();
                    if self.rg(*p) {
                        let mut out = Vec::with_capacity(r * w);
                        for i in 0..r {
                            out.extend_from_slice(
                                &g.data()[i * total + offset..i * total + offset + w],
                            );
                        }
                        self.accumulate(grads, *p, Tensor::new(x.shape().to_vec(), out)?);
                    }
                    offset += w;
                }
            }
            Op::Minimum(a, b) => {
                let (xa, xb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let take_a: Vec<bool> = xa
                    .data()
                    .iter()
                    .zip(xb.data())
                    .map(|(u, v)| u <= v)
                    .collect();
                if self.rg(*a) {
                    let out = g
                        .data()
                        .iter()
                        .zip(&take_a)
                        .map(|(gv, &t)| if t { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(xa.shape().to_vec(), out)?);
                }
                if self.rg(*b) {
                    let out = g
                        .data()
                        .iter()
                        .zip(&take_a)
                        .map(|(gv, &t)| if t { 0.0 } else { *gv })
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(xb.shape().to_vec(), out)?);
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value;
                let out = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv >= *lo && *xv <= *hi { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), out)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item().unwrap(), 6.0);
    }

    #[test]
    fn sin_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sin(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item().unwrap(), 1.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(NnError::Contract(_))));
    }

    #[test]
    fn nan_reports_node() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sqrt(x); // infinite slope at 0
        assert!(matches!(tape.backward(y), Err(NnError::Numeric { node: 0, .. })));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        let y = tape.log(x);
        assert!(matches!(tape.backward(y), Err(NnError::Numeric { node: 1, .. })));
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::row(vec![1.0, 1.0]));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![0.5, -0.5]));
        let y = tape.add(x, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).shape(), &[2]);
        assert_eq!(g.wrt(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_gradients() {
        // loss = sum(A·B); dA = 1·Bᵀ, dB = Aᵀ·1
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.leaf(Tensor::matrix(3, 2, vec![1., 0., 0., 1., 2., 3.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[7., 11., 16., 23.]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).data(), &[1., 1., 5., 1., 1., 5.]);
        assert_eq!(g.wrt(b).data(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn tanh_tracks_libm() {
        for k in -4000..=4000 {
            let x = k as f64 * 0.00537;
            assert!((tanh(x) - x.tanh()).abs() <= 4.0 * f64::EPSILON, "{x}");
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(800.0), 1.0);
        assert_eq!(tanh(-800.0), -1.0);
    }
}
