use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::tensor::{gemm, Operand, Tensor};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Square(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Silu(usize),
    GatherCols(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SparseMatMulT(usize, Rc<CsrMatrix>),
    LogDetSpd(usize, Tensor),
}

#[derive(Default)]
struct Inner {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Every operation on a [`Var`] appends one node. [`Tape::backward`] does not
/// consume the tape: each call runs a fresh reverse sweep in which every node
/// is visited once, so repeated calls return identical gradients. Training
/// rebuilds the tape every iteration.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not reach the root.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.ops.push(op);
        inner.needs_grad.push(needs_grad);
        Var {
            tape: self,
            id: inner.ops.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let inner = self.inner.borrow();
        let shape = inner.values[root.id].shape();
        if shape != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {shape:?}"
            )));
        }
        let n = root.id + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; inner.ops.len()];
        grads[root.id] = Some(Tensor::scalar(1.0));
        for id in (0..n).rev() {
            if !inner.needs_grad[id] {
                continue;
            }
            let op = &inner.ops[id];
            if matches!(op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&inner, id, op, g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: inner.values.iter().map(Tensor::shape).collect(),
        })
    }
}

fn accumulate(inner: &Inner, grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !inner.needs_grad[id] {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Sums `g` down to `shape` along broadcast dimensions.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let (gr, gc) = g.shape();
    let mut out = Tensor::zeros(shape.0, shape.1);
    let o = out.data_mut();
    for i in 0..gr {
        let row = g.row_slice(i);
        match shape {
            (1, 1) => o[0] += row.iter().sum::<f64>(),
            (1, _) => o.iter_mut().zip(row).for_each(|(a, b)| *a += b),
            (_, 1) => o[i] += row.iter().sum::<f64>(),
            _ => unreachable!("({gr}, {gc}) does not broadcast from {shape:?}"),
        }
    }
    out
}

/// `f(a[i, j], b[i', j'])` over the broadcast shape of `a` and `b`.
fn broadcast_apply(a: &Tensor, b: &Tensor, (r, c): (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(r, c, data).unwrap();
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ar = a.row_slice(if a.rows() == 1 { 0 } else { i });
        let br = b.row_slice(if b.rows() == 1 { 0 } else { i });
        match (ar.len() == c, br.len() == c) {
            (true, true) => data.extend(ar.iter().zip(br).map(|(&x, &y)| f(x, y))),
            (true, false) => data.extend(ar.iter().map(|&x| f(x, br[0]))),
            (false, true) => data.extend(br.iter().map(|&y| f(ar[0], y))),
            (false, false) => data.extend(std::iter::repeat_n(f(ar[0], br[0]), c)),
        }
    }
    Tensor::new(r, c, data).unwrap()
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    // `other` is either the same shape as `g` or broadcast into it
    broadcast_apply(g, other, g.shape(), f)
}

fn backprop(inner: &Inner, id: usize, op: &Op, g: Tensor, grads: &mut [Option<Tensor>]) {
    let val = |k: usize| &inner.values[k];
    let ng = |k: usize| inner.needs_grad[k];
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if ng(*b) {
                accumulate(inner, grads, *b, reduce_to(g.clone(), val(*b).shape()));
            }
            accumulate(inner, grads, *a, reduce_to(g, val(*a).shape()));
        }
        Op::Sub(a, b) => {
            if ng(*b) {
                accumulate(inner, grads, *b, reduce_to(g.map(|x| -x), val(*b).shape()));
            }
            accumulate(inner, grads, *a, reduce_to(g, val(*a).shape()));
        }
        Op::Mul(a, b) => {
            if ng(*a) {
                let ga = zip_map(&g, val(*b), |g, y| g * y);
                accumulate(inner, grads, *a, reduce_to(ga, val(*a).shape()));
            }
            if ng(*b) {
                let gb = zip_map(&g, val(*a), |g, x| g * x);
                accumulate(inner, grads, *b, reduce_to(gb, val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            if ng(*a) {
                let ga = zip_map(&g, val(*b), |g, y| g / y);
                accumulate(inner, grads, *a, reduce_to(ga, val(*a).shape()));
            }
            if ng(*b) {
                // d(a/b)/db = -out / b
                let q = zip_map(&inner.values[id], val(*b), |o, y| -o / y);
                let gb = zip_map(&g, &q, |g, q| g * q);
                accumulate(inner, grads, *b, reduce_to(gb, val(*b).shape()));
            }
        }
        Op::Neg(a) => accumulate(inner, grads, *a, g.map(|x| -x)),
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(inner, grads, *a, g.map(|x| c * x))
        }
        Op::Offset(a) => accumulate(inner, grads, *a, g),
        Op::MatMul(a, b) => {
            if ng(*a) {
                let mut ga = Tensor::zeros(val(*a).rows(), val(*a).cols());
                gemm(Operand::plain(&g), Operand::transposed(val(*b)), &mut ga, 0.0);
                accumulate(inner, grads, *a, ga);
            }
            if ng(*b) {
                let mut gb = Tensor::zeros(val(*b).rows(), val(*b).cols());
                gemm(Operand::transposed(val(*a)), Operand::plain(&g), &mut gb, 0.0);
                accumulate(inner, grads, *b, gb);
            }
        }
        Op::Transpose(a) => accumulate(inner, grads, *a, g.transpose()),
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(inner, grads, *a, Tensor::full(r, c, g.item()));
        }
        Op::SumRows(a) => {
            let (r, c) = val(*a).shape();
            accumulate(inner, grads, *a, Tensor::from_fn(r, c, |_, j| g.get(0, j)));
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).shape();
            accumulate(inner, grads, *a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
        }
        Op::Square(a) => {
            let ga = zip_map(&g, val(*a), |g, x| 2.0 * g * x);
            accumulate(inner, grads, *a, ga);
        }
        Op::Exp(a) => {
            let ga = zip_map(&g, &inner.values[id], |g, y| g * y);
            accumulate(inner, grads, *a, ga);
        }
        Op::Log(a) => {
            let ga = zip_map(&g, val(*a), |g, x| g / x);
            accumulate(inner, grads, *a, ga);
        }
        Op::Tanh(a) => {
            let ga = zip_map(&g, &inner.values[id], |g, y| g * (1.0 - y * y));
            accumulate(inner, grads, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = zip_map(&g, &inner.values[id], |g, y| g * y * (1.0 - y));
            accumulate(inner, grads, *a, ga);
        }
        Op::Silu(a) => {
            let ga = zip_map(&g, val(*a), |g, x| {
                let s = sigmoid(x);
                g * s * (1.0 + x * (1.0 - s))
            });
            accumulate(inner, grads, *a, ga);
        }
        Op::GatherCols(a, idx) => {
            let (r, c) = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                for (k, &j) in idx.iter().enumerate() {
                    let v = ga.get(i, j) + g.get(i, k);
                    ga.set(i, j, v);
                }
            }
            accumulate(inner, grads, *a, ga);
        }
        Op::GatherRows(a, idx) => {
            let (r, c) = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    let v = ga.get(i, j) + g.get(k, j);
                    ga.set(i, j, v);
                }
            }
            accumulate(inner, grads, *a, ga);
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = val(p).shape();
                if ng(p) {
                    let gp = Tensor::from_fn(r, c, |i, j| g.get(i, offset + j));
                    accumulate(inner, grads, p, gp);
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = val(p).shape();
                if ng(p) {
                    let gp = Tensor::from_fn(r, c, |i, j| g.get(offset + i, j));
                    accumulate(inner, grads, p, gp);
                }
                offset += r;
            }
        }
        Op::SparseMatMulT(a, m) => {
            let (r, c) = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                let gi = g.row_slice(i);
                let row = &mut ga.data_mut()[i * c..(i + 1) * c];
                for (k, &gk) in gi.iter().enumerate() {
                    if gk != 0.0 {
                        for (col, v) in m.row(k) {
                            row[col] += v * gk;
                        }
                    }
                }
            }
            accumulate(inner, grads, *a, ga);
        }
        Op::LogDetSpd(a, inv) => {
            let s = g.item();
            accumulate(inner, grads, *a, inv.map(|x| s * x));
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    Ok(broadcast_apply(a, b, shape, f))
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().values[self.id].clone()
    }

    /// Runs `f` on the stored value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().values[self.id])
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|t| t.shape())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().needs_grad[self.id]
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let (value, ng) = {
            let inner = self.tape.inner.borrow();
            (f(&inner.values[self.id]), inner.needs_grad[self.id])
        };
        self.tape.push(value, op, ng)
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (value, ng) = {
            let inner = self.tape.inner.borrow();
            let v = f(&inner.values[self.id], &inner.values[other.id])?;
            (v, inner.needs_grad[self.id] || inner.needs_grad[other.id])
        };
        Ok(self.tape.push(value, op, ng))
    }

    pub fn try_add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| {
            broadcast_zip("add", a, b, |x, y| x + y)
        })
    }

    pub fn try_sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            broadcast_zip("sub", a, b, |x, y| x - y)
        })
    }

    pub fn try_mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            broadcast_zip("mul", a, b, |x, y| x * y)
        })
    }

    pub fn try_div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| {
            broadcast_zip("div", a, b, |x, y| x / y)
        })
    }

    pub fn try_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.try_matmul(other).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|x| c * x))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |t| t.map(|x| x + c))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    /// Column sums, `1 x cols`.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), |t| {
            let mut out = vec![0.0; t.cols()];
            for i in 0..t.rows() {
                for (o, x) in out.iter_mut().zip(t.row_slice(i)) {
                    *o += x;
                }
            }
            Tensor::row(out)
        })
    }

    /// Row sums, `rows x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id), |t| {
            Tensor::col((0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect())
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(|t| t.len()) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |t| t.map(|x| x * x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn try_log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.with_value(|t| t.data().iter().copied().find(|&x| !(x > 0.0))) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Op::Log(self.id), |t| t.map(f64::ln)))
    }

    pub fn log(self) -> Var<'t> {
        self.try_log().unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |t| t.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |t| t.map(sigmoid))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu(self.id), |t| t.map(|x| x * sigmoid(x)))
    }

    pub fn try_gather_cols(self, idx: &[usize]) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Shape {
                op: "gather_cols",
                lhs: (r, c),
                rhs: (1, bad),
            });
        }
        Ok(self.unary(Op::GatherCols(self.id, idx.to_vec()), |t| {
            Tensor::from_fn(r, idx.len(), |i, k| t.get(i, idx[k]))
        }))
    }

    pub fn gather_cols(self, idx: &[usize]) -> Var<'t> {
        self.try_gather_cols(idx).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Contiguous column range `start..end`.
    pub fn cols_range(self, start: usize, end: usize) -> Var<'t> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_cols(&idx)
    }

    pub fn try_gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: (r, c),
                rhs: (bad, 1),
            });
        }
        Ok(self.unary(Op::GatherRows(self.id, idx.to_vec()), |t| {
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                data.extend_from_slice(t.row_slice(i));
            }
            Tensor::new(idx.len(), c, data).unwrap()
        }))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        self.try_gather_rows(idx).unwrap_or_else(|e| panic!("{e}"))
    }

    /// `self * A^T` for a constant sparse `A`.
    pub fn try_sparse_matmul_t(self, a: &Rc<CsrMatrix>) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if c != a.n_cols() {
            return Err(Error::Shape {
                op: "sparse_matmul_t",
                lhs: (r, c),
                rhs: (a.n_rows(), a.n_cols()),
            });
        }
        Ok(self.unary(Op::SparseMatMulT(self.id, Rc::clone(a)), |t| {
            let m = a.n_rows();
            let mut out = Tensor::zeros(r, m);
            for i in 0..r {
                let x = t.row_slice(i);
                for k in 0..m {
                    let v: f64 = a.row(k).map(|(col, v)| v * x[col]).sum();
                    out.set(i, k, v);
                }
            }
            out
        }))
    }

    pub fn sparse_matmul_t(self, a: &Rc<CsrMatrix>) -> Var<'t> {
        self.try_sparse_matmul_t(a).unwrap_or_else(|e| panic!("{e}"))
    }

    /// `log det` of a small symmetric positive-definite matrix.
    pub fn try_logdet_spd(self) -> Result<Var<'t>> {
        let m = self.value();
        let (chol, inv) = cholesky_with_inverse(&m)?;
        let logdet = 2.0 * (0..m.rows()).map(|i| chol.get(i, i).ln()).sum::<f64>();
        Ok(self.tape.push(
            Tensor::scalar(logdet),
            Op::LogDetSpd(self.id, inv),
            self.requires_grad(),
        ))
    }

    pub fn logdet_spd(self) -> Var<'t> {
        self.try_logdet_spd().unwrap_or_else(|e| panic!("{e}"))
    }
}

/// Concatenates along columns (all parts share the row count).
pub fn try_concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    concat(parts, true)
}

pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    concat(parts, true).unwrap_or_else(|e| panic!("{e}"))
}

/// Concatenates along rows (all parts share the column count).
pub fn try_concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    concat(parts, false)
}

pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    concat(parts, false).unwrap_or_else(|e| panic!("{e}"))
}

fn concat<'t>(parts: &[Var<'t>], along_cols: bool) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let tape = first.tape;
    let (value, ng) = {
        let inner = tape.inner.borrow();
        let shapes: Vec<_> = parts.iter().map(|p| inner.values[p.id].shape()).collect();
        let (r0, c0) = shapes[0];
        for &s in &shapes[1..] {
            let ok = if along_cols { s.0 == r0 } else { s.1 == c0 };
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: (r0, c0),
                    rhs: s,
                });
            }
        }
        let value = if along_cols {
            let total: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for p in parts {
                    data.extend_from_slice(inner.values[p.id].row_slice(i));
                }
            }
            Tensor::new(r0, total, data)?
        } else {
            let total: usize = shapes.iter().map(|s| s.0).sum();
            let mut data = Vec::with_capacity(total * c0);
            for p in parts {
                data.extend_from_slice(inner.values[p.id].data());
            }
            Tensor::new(total, c0, data)?
        };
        (value, parts.iter().any(|p| inner.needs_grad[p.id]))
    };
    let ids = parts.iter().map(|p| p.id).collect();
    let op = if along_cols {
        Op::ConcatCols(ids)
    } else {
        Op::ConcatRows(ids)
    };
    Ok(tape.push(value, op, ng))
}

/// Cholesky factor and inverse of a small SPD matrix.
fn cholesky_with_inverse(m: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Shape {
            op: "logdet_spd",
            lhs: m.shape(),
            rhs: m.shape(),
        });
    }
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = m.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) {
            return Err(Error::Domain {
                op: "logdet_spd",
                msg: "matrix is not positive definite".into(),
            });
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    // inverse column by column from L L^T x = e_k
    let mut inv = Tensor::zeros(n, n);
    for k in 0..n {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = if i == k { 1.0 } else { 0.0 };
            for j in 0..i {
                s -= l.get(i, j) * y[j];
            }
            y[i] = s / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= l.get(j, i) * inv.get(j, k);
            }
            inv.set(i, k, s / l.get(i, i));
        }
    }
    Ok((l, inv))
}

macro_rules! binop {
    ($trait:ident, $method:ident, $try:ident) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.$try(rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
    };
}

binop!(Add, add, try_add);
binop!(Sub, sub, try_sub);
binop!(Mul, mul, try_mul);
binop!(Div, div, try_div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |t| t.map(|x| -x))
    }
}
