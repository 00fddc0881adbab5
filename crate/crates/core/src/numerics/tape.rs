//! Reverse-mode automatic differentiation over batched 2-D tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the record in reverse and
//! accumulates adjoints. Tapes are cheap and meant to be rebuilt for every
//! loss evaluation.
//!
//! Binary elementwise operations broadcast over size-1 rows or columns, which
//! covers bias rows `[1, c]`, per-sample scalars `[r, 1]` and global scalars
//! `[1, 1]`.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::rng::RandomStream;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Silu,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    Tanh,
    Square,
    Recip,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MaxConst(usize, f64),
    Unary(usize, Unary),
    SumAll(usize),
    SumCols(usize),
    SumRows(usize),
    Concat(Vec<usize>),
    Gather(usize, Rc<[usize]>),
    Reshape(usize),
    NonDiff,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.idx).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.idx];
                Tensor::zeros(&[r, c])
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let pick = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (pick(a.0, b.0), pick(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

/// Row and column strides that read a broadcast operand as if it had the
/// output's shape.
fn bstrides(d: (usize, usize)) -> (usize, usize) {
    (
        if d.0 == 1 { 0 } else { d.1 },
        if d.1 == 1 { 0 } else { 1 },
    )
}

fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (da, db) = (dims(a), dims(b));
    if da == db {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::matrix(da.0, da.1, data));
    }
    let (r, c) = broadcast_dims(da, db)?;
    let (sa, sb) = (bstrides(da), bstrides(db));
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(ad[i * sa.0 + j * sa.1], bd[i * sb.0 + j * sb.1]));
        }
    }
    Ok(Tensor::matrix(r, c, out))
}

/// Sums a `[r, c]` adjoint down to the operand's (possibly broadcast) shape.
fn reduce_to(g: Tensor, target: (usize, usize)) -> Tensor {
    let (r, c) = dims(&g);
    if (r, c) == target {
        return g;
    }
    let mut out = vec![0.0; target.0 * target.1];
    let s = bstrides(target);
    let gd = g.data();
    for i in 0..r {
        for j in 0..c {
            out[i * s.0 + j * s.1] += gd[i * c + j];
        }
    }
    Tensor::matrix(target.0, target.1, out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_unary(k: Unary, x: f64) -> f64 {
    match k {
        Unary::Silu => x * sigmoid(x),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Square => x * x,
        Unary::Recip => 1.0 / x,
    }
}

/// d(output)/d(input) given the input `x` and output `y`.
fn unary_derivative(k: Unary, x: f64, y: f64) -> f64 {
    match k {
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sqrt => 0.5 / y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Square => 2.0 * x,
        Unary::Recip => -y * y,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        let value = as_matrix(value);
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let value = as_matrix(value);
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column-wise concatenation of operands with equal row counts.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let rows = parts
            .iter()
            .map(|p| nodes[p.idx].value.rows())
            .max()
            .unwrap_or(0);
        let mut cols = 0;
        for p in parts {
            let (r, c) = dims(&nodes[p.idx].value);
            if r != rows && r != 1 {
                return Err(Error::Shape(format!("concat rows {r} vs {rows}")));
            }
            cols += c;
        }
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for p in parts {
            let v = &nodes[p.idx].value;
            let (r, c) = dims(v);
            for i in 0..rows {
                let src = if r == 1 { 0 } else { i };
                out[i * cols + off..i * cols + off + c].copy_from_slice(v.row(src));
            }
            off += c;
        }
        let ng = parts.iter().any(|p| nodes[p.idx].needs_grad);
        drop(nodes);
        Ok(self.push(
            Tensor::matrix(rows, cols, out),
            Op::Concat(parts.iter().map(|p| p.idx).collect()),
            ng,
        ))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.idx];
        if out.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                out.value.shape()
            )));
        }
        let shapes: Vec<_> = nodes.iter().map(|n| dims(&n.value)).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.idx] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], i: usize, g: Tensor) {
            if !nodes[i].needs_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.axpy(1.0, &g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (r, c) = dims(&node.value);
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::NonDiff => {
                    return Err(Error::Capability(
                        "gradient requested through a non-differentiable operation".into(),
                    ))
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = dims(av);
                    let n = bv.cols();
                    if nodes[*a].needs_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), &mut da, 1.0, 0.0);
                        acc(&mut grads, &nodes, *a, Tensor::matrix(m, k, da));
                    }
                    if nodes[*b].needs_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), &mut db, 1.0, 0.0);
                        acc(&mut grads, &nodes, *b, Tensor::matrix(k, n, db));
                    }
                }
                Op::Add(a, b) => {
                    for &x in [a, b] {
                        if nodes[x].needs_grad {
                            acc(&mut grads, &nodes, x, reduce_to(g.clone(), shapes[x]));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[*a].needs_grad {
                        acc(&mut grads, &nodes, *a, reduce_to(g.clone(), shapes[*a]));
                    }
                    if nodes[*b].needs_grad {
                        acc(&mut grads, &nodes, *b, reduce_to(g.scale(-1.0), shapes[*b]));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].needs_grad {
                        let d = broadcast_zip(&g, bv, |x, y| x * y)?;
                        acc(&mut grads, &nodes, *a, reduce_to(d, shapes[*a]));
                    }
                    if nodes[*b].needs_grad {
                        let d = broadcast_zip(&g, av, |x, y| x * y)?;
                        acc(&mut grads, &nodes, *b, reduce_to(d, shapes[*b]));
                    }
                }
                Op::Div(a, b) => {
                    let bv = &nodes[*b].value;
                    if nodes[*a].needs_grad {
                        let d = broadcast_zip(&g, bv, |x, y| x / y)?;
                        acc(&mut grads, &nodes, *a, reduce_to(d, shapes[*a]));
                    }
                    if nodes[*b].needs_grad {
                        // d(a/b)/db = -(a/b)/b, and a/b is this node's value.
                        let q = broadcast_zip(&node.value, bv, |y, bb| -y / bb)?;
                        let d = broadcast_zip(&g, &q, |x, y| x * y)?;
                        acc(&mut grads, &nodes, *b, reduce_to(d, shapes[*b]));
                    }
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let mask_a = broadcast_zip(av, bv, |x, y| if x <= y { 1.0 } else { 0.0 })?;
                    if nodes[*a].needs_grad {
                        let d = broadcast_zip(&g, &mask_a, |x, m| x * m)?;
                        acc(&mut grads, &nodes, *a, reduce_to(d, shapes[*a]));
                    }
                    if nodes[*b].needs_grad {
                        let d = broadcast_zip(&g, &mask_a, |x, m| x * (1.0 - m))?;
                        acc(&mut grads, &nodes, *b, reduce_to(d, shapes[*b]));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, &nodes, *a, g.scale(*k)),
                Op::AddConst(a) => acc(&mut grads, &nodes, *a, g),
                Op::MaxConst(a, floor) => {
                    let av = &nodes[*a].value;
                    let d = g.zip_map(av, |x, v| if v > *floor { x } else { 0.0 })?;
                    acc(&mut grads, &nodes, *a, d);
                }
                Op::Unary(a, k) => {
                    let av = &nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .zip(node.value.data())
                        .map(|((gv, &x), &y)| gv * unary_derivative(*k, x, y))
                        .collect();
                    acc(&mut grads, &nodes, *a, Tensor::matrix(r, c, data));
                }
                Op::SumAll(a) => {
                    let (ra, ca) = shapes[*a];
                    acc(&mut grads, &nodes, *a, Tensor::full(&[ra, ca], g.item()));
                }
                Op::SumCols(a) => {
                    let (ra, ca) = shapes[*a];
                    let mut d = Vec::with_capacity(ra * ca);
                    for i in 0..ra {
                        d.extend(std::iter::repeat_n(g.data()[i], ca));
                    }
                    acc(&mut grads, &nodes, *a, Tensor::matrix(ra, ca, d));
                }
                Op::SumRows(a) => {
                    let (ra, ca) = shapes[*a];
                    let mut d = Vec::with_capacity(ra * ca);
                    for _ in 0..ra {
                        d.extend_from_slice(g.data());
                    }
                    acc(&mut grads, &nodes, *a, Tensor::matrix(ra, ca, d));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rp, cp) = shapes[p];
                        if nodes[p].needs_grad {
                            let mut d = vec![0.0; rp * cp];
                            for i in 0..r {
                                let dst = if rp == 1 { 0 } else { i };
                                for j in 0..cp {
                                    d[dst * cp + j] += g.data()[i * c + off + j];
                                }
                            }
                            acc(&mut grads, &nodes, p, Tensor::matrix(rp, cp, d));
                        }
                        off += cp;
                    }
                }
                Op::Gather(a, idx) => {
                    let (ra, ca) = shapes[*a];
                    let mut d = vec![0.0; ra * ca];
                    let gd = g.data();
                    for i in 0..r {
                        let dst = &mut d[i * ca..(i + 1) * ca];
                        let src = &gd[i * c..(i + 1) * c];
                        for (j, &k) in idx.iter().enumerate() {
                            dst[k] += src[j];
                        }
                    }
                    acc(&mut grads, &nodes, *a, Tensor::matrix(ra, ca, d));
                }
                Op::Reshape(a) => {
                    let (ra, ca) = shapes[*a];
                    acc(&mut grads, &nodes, *a, Tensor::matrix(ra, ca, g.into_data()));
                }
            }
        }
        // Only leaf adjoints survive; interior ones are dropped as soon as
        // they have been propagated.
        Ok(Gradients { grads, shapes })
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    if t.shape().len() == 2 {
        t
    } else {
        Tensor::matrix(r, c, t.into_data())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.data()[0]
    }

    pub fn shape(&self) -> (usize, usize) {
        dims(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].needs_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(self, other: Var<'t>, op: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(&other);
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx], &nodes[other.idx]);
            let v = broadcast_zip(&a.value, &b.value, f)
                .unwrap_or_else(|e| panic!("{e}"));
            (v, a.needs_grad || b.needs_grad)
        };
        self.tape.push(value, op(self.idx, other.idx), ng)
    }

    fn unary(self, k: Unary) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            (a.value.map(|x| apply_unary(k, x)), a.needs_grad)
        };
        self.tape.push(value, Op::Unary(self.idx, k), ng)
    }

    fn map_op(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            (f(&a.value), a.needs_grad)
        };
        self.tape.push(value, op, ng)
    }

    /// Matrix product `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx], &nodes[other.idx]);
            let v = a.value.matmul(&b.value).unwrap_or_else(|e| panic!("{e}"));
            (v, a.needs_grad || b.needs_grad)
        };
        self.tape.push(value, Op::MatMul(self.idx, other.idx), ng)
    }

    /// Elementwise minimum (broadcasting).
    pub fn min(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Min, f64::min)
    }

    /// `max(self, floor)` with gradient only where the input exceeds `floor`.
    pub fn max_const(self, floor: f64) -> Var<'t> {
        self.map_op(Op::MaxConst(self.idx, floor), |t| t.map(|v| v.max(floor)))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.map_op(Op::Scale(self.idx, k), |t| t.scale(k))
    }

    pub fn add_const(self, k: f64) -> Var<'t> {
        self.map_op(Op::AddConst(self.idx), |t| t.map(|v| v + k))
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }
    pub fn sin(self) -> Var<'t> {
        self.unary(Unary::Sin)
    }
    pub fn cos(self) -> Var<'t> {
        self.unary(Unary::Cos)
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }
    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }

    /// Sum of every entry, `[1, 1]`.
    pub fn sum(self) -> Var<'t> {
        self.map_op(Op::SumAll(self.idx), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.nodes.borrow()[self.idx].value.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum across columns: `[r, c] -> [r, 1]`.
    pub fn sum_cols(self) -> Var<'t> {
        self.map_op(Op::SumCols(self.idx), |t| {
            Tensor::column(t.rows_iter().map(|r| r.iter().sum()).collect())
        })
    }

    /// Sum across rows: `[r, c] -> [1, c]`.
    pub fn sum_rows(self) -> Var<'t> {
        self.map_op(Op::SumRows(self.idx), |t| {
            let mut s = vec![0.0; t.cols()];
            for row in t.rows_iter() {
                for (a, v) in s.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::row_vector(s)
        })
    }

    /// Selects columns by index; indices may repeat.
    pub fn gather_cols(self, idx: Rc<[usize]>) -> Var<'t> {
        let op = Op::Gather(self.idx, idx.clone());
        self.map_op(op, move |t| {
            let (r, c) = dims(t);
            let mut out = Vec::with_capacity(r * idx.len());
            for i in 0..r {
                let row = &t.data()[i * c..(i + 1) * c];
                out.extend(idx.iter().map(|&k| row[k]));
            }
            Tensor::matrix(r, idx.len(), out)
        })
    }

    /// Row-major reinterpretation as `[rows, cols]`.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        self.map_op(Op::Reshape(self.idx), |t| {
            assert_eq!(t.len(), rows * cols, "reshape size mismatch");
            Tensor::matrix(rows, cols, t.data().to_vec())
        })
    }

    /// Applies an arbitrary function eagerly. The result cannot be
    /// differentiated; a backward pass that needs to cross it fails with a
    /// capability error.
    pub fn map_nondiff(self, f: impl Fn(f64) -> f64) -> Var<'t> {
        self.map_op(Op::NonDiff, |t| t.map(&f))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add, |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub, |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul, |a, b| a * b)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Div, |a, b| a / b)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_const(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.add_const(-rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

/// Reverse-mode gradient of a scalar function of one parameter tensor.
pub fn grad<F>(f: F, params: &Tensor) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let p = tape.var(params.clone());
    let out = f(&tape, p);
    let g = tape.backward(out)?;
    let mut gt = g.wrt(p);
    if gt.shape() != params.shape() {
        gt = gt.reshape(params.shape().to_vec())?;
    }
    Ok(gt)
}

/// Largest relative error between the reverse-mode gradient and central
/// differences over the given coordinates.
///
/// The relative error uses `max(|a|, |b|, floor)` as the denominator so that
/// coordinates with vanishing gradient do not blow up the ratio.
pub fn finite_difference_check<F>(
    f: F,
    params: &Tensor,
    coords: &[usize],
    step: f64,
    floor: f64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let analytic = grad(&f, params)?;
    let eval = |p: &Tensor| {
        let tape = Tape::new();
        let v = tape.constant(p.clone());
        f(&tape, v).item()
    };
    let mut worst: f64 = 0.0;
    for &k in coords {
        let mut plus = params.clone();
        plus.data_mut()[k] += step;
        let mut minus = params.clone();
        minus.data_mut()[k] -= step;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let a = analytic.data()[k];
        let denom = a.abs().max(fd.abs()).max(floor);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}

/// Multi-tensor version of [`finite_difference_check`] over `n_coords`
/// randomly chosen parameter coordinates.
pub fn finite_difference_check_multi<F>(
    f: F,
    params: &[Tensor],
    n_coords: usize,
    rng: &mut RandomStream,
    step: f64,
    floor: f64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
    let out = f(&tape, &vars);
    let g = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.wrt(v)).collect();
    let eval = |ps: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        f(&tape, &vars).item()
    };
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    for _ in 0..n_coords {
        let mut k = rng.below(total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let mut ps = params.to_vec();
        ps[which].data_mut()[k] += step;
        let up = eval(&ps);
        ps[which].data_mut()[k] -= 2.0 * step;
        let down = eval(&ps);
        let fd = (up - down) / (2.0 * step);
        let a = analytic[which].data()[k];
        let denom = a.abs().max(fd.abs()).max(floor);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}
