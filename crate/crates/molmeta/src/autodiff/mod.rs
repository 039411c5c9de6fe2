//! Dense-tensor computation graph with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation whose inputs require gradients. Values
//! are owned by the tape; a [`Var`] is a cheap copyable handle into it.
//! Calling [`Tape::backward`] on a scalar loss walks the recording in reverse
//! and accumulates exact gradients for every tensor that requires them.
//!
//! A tape is confined to one logical thread for the duration of a
//! forward/backward pass; independent tapes may run on distinct threads.

pub mod params;

use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::fmt;

/// Negative slope shared by every LeakyReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("softmax axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
}

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; len])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v])
    }

    pub fn vector(v: &[f64]) -> Self {
        Tensor::new(vec![v.len()], v.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    /// Marks the tensor as a trainable input.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Single stored value; panics unless the tensor holds exactly one.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

/// One recorded operation. Indices refer to earlier tape nodes.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddN(Vec<usize>),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    MatVec(usize, usize),
    Abs(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Softmax(usize, usize),
    Sum(usize),
    Mean(usize),
    Concat(usize, usize),
    CosineSim(usize, usize),
    /// `a * x + b`; only the slope matters for the gradient.
    Affine(usize, f64),
    Clamp(usize, f64, f64),
    /// Select one row of a matrix.
    Row(usize, usize),
    /// Stack scalars into a vector.
    Stack(Vec<usize>),
    Detach,
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered operation record. Every op's inputs precede it on the tape.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.tape.shape_of(self.idx))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Records an input tensor; it participates in backward iff it was
    /// marked with [`Tensor::with_grad`].
    pub fn input(&self, t: Tensor) -> Var<'_> {
        let rg = t.requires_grad;
        self.push(Op::Leaf, t, rg)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(Op::Leaf, t, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn value_of(&self, idx: usize) -> Tensor {
        self.nodes.borrow()[idx].value.clone()
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.nodes.borrow()[idx].value.shape.clone()
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    pub fn add(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>, AutodiffError> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a.idx, b.idx))
    }

    pub fn sub(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>, AutodiffError> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a.idx, b.idx))
    }

    pub fn mul(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>, AutodiffError> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a.idx, b.idx))
    }

    /// Elementwise op over equal shapes, or broadcast when one side is scalar.
    fn broadcast_binary(
        &self,
        name: &'static str,
        a: Var<'_>,
        b: Var<'_>,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'_>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.idx].value;
        let vb = &nodes[b.idx].value;
        let out = if va.shape == vb.shape {
            let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape.clone(), data)
        } else if vb.is_scalar() {
            let s = vb.data[0];
            Tensor::new(va.shape.clone(), va.data.iter().map(|&x| f(x, s)).collect())
        } else if va.is_scalar() {
            let s = va.data[0];
            Tensor::new(vb.shape.clone(), vb.data.iter().map(|&y| f(s, y)).collect())
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        };
        let rg = nodes[a.idx].requires_grad || nodes[b.idx].requires_grad;
        drop(nodes);
        Ok(self.push(op, out, rg))
    }

    /// Sum of several tensors of identical shape.
    pub fn add_n(&self, vars: &[Var<'_>]) -> Result<Var<'_>, AutodiffError> {
        assert!(!vars.is_empty(), "add_n of nothing");
        let nodes = self.nodes.borrow();
        let shape = nodes[vars[0].idx].value.shape.clone();
        let mut data = vec![0.0; nodes[vars[0].idx].value.len()];
        let mut rg = false;
        for v in vars {
            let t = &nodes[v.idx].value;
            if t.shape != shape {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add_n",
                    lhs: shape,
                    rhs: t.shape.clone(),
                });
            }
            for (acc, x) in data.iter_mut().zip(&t.data) {
                *acc += x;
            }
            rg |= nodes[v.idx].requires_grad;
        }
        drop(nodes);
        Ok(self.push(
            Op::AddN(vars.iter().map(|v| v.idx).collect()),
            Tensor::new(shape, data),
            rg,
        ))
    }

    /// `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.idx].value;
        let vb = &nodes[b.idx].value;
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: va.shape.clone(),
            rhs: vb.shape.clone(),
        };
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(mismatch());
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &vb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = nodes[a.idx].requires_grad || nodes[b.idx].requires_grad;
        drop(nodes);
        Ok(self.push(Op::MatMul(a.idx, b.idx), Tensor::matrix(m, n, out), rg))
    }

    /// `(m,n) x (n,) -> (m,)`.
    pub fn matvec(&self, w: Var<'_>, x: Var<'_>) -> Result<Var<'_>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let vw = &nodes[w.idx].value;
        let vx = &nodes[x.idx].value;
        if vw.shape.len() != 2 || vx.shape.len() != 1 || vw.shape[1] != vx.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec",
                lhs: vw.shape.clone(),
                rhs: vx.shape.clone(),
            });
        }
        let (m, n) = (vw.shape[0], vw.shape[1]);
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &vw.data[i * n..(i + 1) * n];
            out[i] = row.iter().zip(&vx.data).map(|(&wv, &xv)| wv * xv).sum();
        }
        let rg = nodes[w.idx].requires_grad || nodes[x.idx].requires_grad;
        drop(nodes);
        Ok(self.push(Op::MatVec(w.idx, x.idx), Tensor::vector(&out), rg))
    }

    fn unary(&self, a: Var<'_>, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.idx].value;
        let out = Tensor::new(va.shape.clone(), va.data.iter().map(|&x| f(x)).collect());
        let rg = nodes[a.idx].requires_grad;
        drop(nodes);
        self.push(op, out, rg)
    }

    pub fn abs(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, Op::Abs(a.idx), f64::abs)
    }

    pub fn exp(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, Op::Exp(a.idx), f64::exp)
    }

    pub fn log(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, Op::Log(a.idx), f64::ln)
    }

    pub fn sigmoid(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, Op::Sigmoid(a.idx), sigmoid)
    }

    pub fn leaky_relu(&self, a: Var<'_>) -> Var<'_> {
        self.unary(a, Op::LeakyRelu(a.idx, LEAKY_SLOPE), |x| {
            if x > 0.0 {
                x
            } else {
                LEAKY_SLOPE * x
            }
        })
    }

    /// `a * x + b` with constants; covers negation, scaling and shifting.
    pub fn affine(&self, x: Var<'_>, a: f64, b: f64) -> Var<'_> {
        self.unary(x, Op::Affine(x.idx, a), |v| a * v + b)
    }

    pub fn clamp(&self, x: Var<'_>, lo: f64, hi: f64) -> Var<'_> {
        self.unary(x, Op::Clamp(x.idx, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, a: Var<'_>, axis: usize) -> Result<Var<'_>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.idx].value;
        if axis >= va.shape.len() && !(va.shape.is_empty() && axis == 0) {
            return Err(AutodiffError::BadAxis {
                axis,
                shape: va.shape.clone(),
            });
        }
        let out = softmax_forward(va, axis);
        let rg = nodes[a.idx].requires_grad;
        drop(nodes);
        Ok(self.push(Op::Softmax(a.idx, axis), out, rg))
    }

    pub fn sum(&self, a: Var<'_>) -> Var<'_> {
        let nodes = self.nodes.borrow();
        let total: f64 = nodes[a.idx].value.data.iter().sum();
        let rg = nodes[a.idx].requires_grad;
        drop(nodes);
        self.push(Op::Sum(a.idx), Tensor::scalar(total), rg)
    }

    pub fn mean(&self, a: Var<'_>) -> Var<'_> {
        let nodes = self.nodes.borrow();
        let n = nodes[a.idx].value.len() as f64;
        let total: f64 = nodes[a.idx].value.data.iter().sum();
        let rg = nodes[a.idx].requires_grad;
        drop(nodes);
        self.push(Op::Mean(a.idx), Tensor::scalar(total / n), rg)
    }

    /// Concatenation of two vectors.
    pub fn concat(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.idx].value;
        let vb = &nodes[b.idx].value;
        if va.shape.len() != 1 || vb.shape.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let mut data = va.data.clone();
        data.extend_from_slice(&vb.data);
        let rg = nodes[a.idx].requires_grad || nodes[b.idx].requires_grad;
        drop(nodes);
        Ok(self.push(Op::Concat(a.idx, b.idx), Tensor::vector(&data), rg))
    }

    /// Cosine similarity of two equal-length vectors; errors on zero norm.
    pub fn cosine_sim(&self, a: Var<'_>, b: Var<'_>) -> Result<Var<'_>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let va = &nodes[a.idx].value;
        let vb = &nodes[b.idx].value;
        if va.shape != vb.shape || va.shape.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "cosine_sim",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let na = norm(&va.data);
        let nb = norm(&vb.data);
        if na == 0.0 || nb == 0.0 {
            return Err(AutodiffError::ZeroVector);
        }
        let dot: f64 = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).sum();
        let rg = nodes[a.idx].requires_grad || nodes[b.idx].requires_grad;
        drop(nodes);
        Ok(self.push(Op::CosineSim(a.idx, b.idx), Tensor::scalar(dot / (na * nb)), rg))
    }

    /// Selects row `row` of a matrix as a vector.
    pub fn row(&self, m: Var<'_>, row: usize) -> Var<'_> {
        let nodes = self.nodes.borrow();
        let vm = &nodes[m.idx].value;
        assert_eq!(vm.shape.len(), 2, "row() needs a matrix, got {:?}", vm.shape);
        assert!(row < vm.shape[0], "row {} out of range", row);
        let cols = vm.shape[1];
        let data = vm.data[row * cols..(row + 1) * cols].to_vec();
        let rg = nodes[m.idx].requires_grad;
        drop(nodes);
        self.push(Op::Row(m.idx, row), Tensor::vector(&data), rg)
    }

    /// Stacks scalars into a vector.
    pub fn stack(&self, vars: &[Var<'_>]) -> Result<Var<'_>, AutodiffError> {
        let nodes = self.nodes.borrow();
        let mut data = Vec::with_capacity(vars.len());
        let mut rg = false;
        for v in vars {
            let t = &nodes[v.idx].value;
            if !t.is_scalar() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "stack",
                    lhs: vec![],
                    rhs: t.shape.clone(),
                });
            }
            data.push(t.data[0]);
            rg |= nodes[v.idx].requires_grad;
        }
        drop(nodes);
        Ok(self.push(
            Op::Stack(vars.iter().map(|v| v.idx).collect()),
            Tensor::vector(&data),
            rg,
        ))
    }

    /// Copies the value and stops gradient flow through it.
    pub fn detach(&self, a: Var<'_>) -> Var<'_> {
        let value = self.value_of(a.idx);
        self.push(Op::Detach, value, false)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of earlier sweeps
    /// are discarded, so repeated calls are bit-identical.
    pub fn backward(&self, loss: Var<'_>) -> Result<(), AutodiffError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.len() != 1 {
            return Err(AutodiffError::NotScalarLoss(
                nodes[loss.idx].value.shape.clone(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::new(
            nodes[loss.idx].value.shape.clone(),
            vec![1.0],
        ));

        for i in (0..=loss.idx).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward sweep; zeros when the var took no part.
    pub fn grad(&self, v: Var<'_>) -> Tensor {
        let grads = self.grads.borrow();
        match grads.get(v.idx).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shape_of(v.idx)),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn softmax_forward(t: &Tensor, axis: usize) -> Tensor {
    if t.shape.is_empty() {
        return Tensor::new(vec![], vec![1.0]);
    }
    let n = t.shape[axis];
    let inner: usize = t.shape[axis + 1..].iter().product();
    let outer: usize = t.shape[..axis].iter().product();
    let mut out = vec![0.0; t.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| t.data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for k in 0..n {
                let e = (t.data[at(k)] - max).exp();
                out[at(k)] = e;
                denom += e;
            }
            for k in 0..n {
                out[at(k)] /= denom;
            }
        }
    }
    Tensor::new(t.shape.clone(), out)
}

/// Distributes `g`, the gradient at node `i`, onto the node's inputs.
fn backprop_node(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let acc = |grads: &mut [Option<Tensor>], j: usize, update: &mut dyn FnMut(&mut Tensor)| {
        if !nodes[j].requires_grad {
            return;
        }
        let slot = grads[j].get_or_insert_with(|| Tensor::zeros(&nodes[j].value.shape));
        update(slot);
    };

    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, *a, &mut |slot| add_broadcast(slot, g, 1.0));
            acc(grads, *b, &mut |slot| add_broadcast(slot, g, 1.0));
        }
        Op::AddN(inputs) => {
            for &j in inputs {
                acc(grads, j, &mut |slot| slot.add_scaled(g, 1.0));
            }
        }
        Op::Sub(a, b) => {
            acc(grads, *a, &mut |slot| add_broadcast(slot, g, 1.0));
            acc(grads, *b, &mut |slot| add_broadcast(slot, g, -1.0));
        }
        Op::Mul(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            acc(grads, *a, &mut |slot| mul_backward(slot, g, vb));
            acc(grads, *b, &mut |slot| mul_backward(slot, g, va));
        }
        Op::MatMul(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let (m, k) = (va.shape[0], va.shape[1]);
            let n = vb.shape[1];
            acc(grads, *a, &mut |slot| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.data[i * n + j] * vb.data[p * n + j];
                        }
                        slot.data[i * k + p] += s;
                    }
                }
            });
            acc(grads, *b, &mut |slot| {
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += va.data[i * k + p] * g.data[i * n + j];
                        }
                        slot.data[p * n + j] += s;
                    }
                }
            });
        }
        Op::MatVec(w, x) => {
            let vw = &nodes[*w].value;
            let vx = &nodes[*x].value;
            let (m, n) = (vw.shape[0], vw.shape[1]);
            acc(grads, *w, &mut |slot| {
                for i in 0..m {
                    let gi = g.data[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &mut slot.data[i * n..(i + 1) * n];
                    for (s, &xv) in row.iter_mut().zip(&vx.data) {
                        *s += gi * xv;
                    }
                }
            });
            acc(grads, *x, &mut |slot| {
                for i in 0..m {
                    let gi = g.data[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &vw.data[i * n..(i + 1) * n];
                    for (s, &wv) in slot.data.iter_mut().zip(row) {
                        *s += gi * wv;
                    }
                }
            });
        }
        Op::Abs(a) => {
            let va = &nodes[*a].value;
            acc(grads, *a, &mut |slot| {
                for ((s, &gv), &xv) in slot.data.iter_mut().zip(&g.data).zip(&va.data) {
                    // subgradient at 0 is 0
                    *s += gv * if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            });
        }
        Op::Exp(a) => {
            let out = &nodes[i].value;
            acc(grads, *a, &mut |slot| {
                for ((s, &gv), &ov) in slot.data.iter_mut().zip(&g.data).zip(&out.data) {
                    *s += gv * ov;
                }
            });
        }
        Op::Log(a) => {
            let va = &nodes[*a].value;
            acc(grads, *a, &mut |slot| {
                for ((s, &gv), &xv) in slot.data.iter_mut().zip(&g.data).zip(&va.data) {
                    *s += gv / xv;
                }
            });
        }
        Op::Sigmoid(a) => {
            let out = &nodes[i].value;
            acc(grads, *a, &mut |slot| {
                for ((s, &gv), &ov) in slot.data.iter_mut().zip(&g.data).zip(&out.data) {
                    *s += gv * ov * (1.0 - ov);
                }
            });
        }
        Op::LeakyRelu(a, slope) => {
            let va = &nodes[*a].value;
            let slope = *slope;
            acc(grads, *a, &mut |slot| {
                for ((s, &gv), &xv) in slot.data.iter_mut().zip(&g.data).zip(&va.data) {
                    *s += gv * if xv > 0.0 { 1.0 } else { slope };
                }
            });
        }
        Op::Softmax(a, axis) => {
            let out = &nodes[i].value;
            let axis = *axis;
            acc(grads, *a, &mut |slot| {
                if out.shape.is_empty() {
                    return; // softmax of a scalar is constant 1
                }
                let n = out.shape[axis];
                let inner: usize = out.shape[axis + 1..].iter().product();
                let outer: usize = out.shape[..axis].iter().product();
                for o in 0..outer {
                    for iin in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + iin;
                        let dot: f64 = (0..n).map(|k| g.data[at(k)] * out.data[at(k)]).sum();
                        for k in 0..n {
                            slot.data[at(k)] += out.data[at(k)] * (g.data[at(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::Sum(a) => {
            let gv = g.data[0];
            acc(grads, *a, &mut |slot| {
                for s in slot.data.iter_mut() {
                    *s += gv;
                }
            });
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            let gv = g.data[0] / n;
            acc(grads, *a, &mut |slot| {
                for s in slot.data.iter_mut() {
                    *s += gv;
                }
            });
        }
        Op::Concat(a, b) => {
            let la = nodes[*a].value.len();
            acc(grads, *a, &mut |slot| {
                for (s, &gv) in slot.data.iter_mut().zip(&g.data[..la]) {
                    *s += gv;
                }
            });
            acc(grads, *b, &mut |slot| {
                for (s, &gv) in slot.data.iter_mut().zip(&g.data[la..]) {
                    *s += gv;
                }
            });
        }
        Op::CosineSim(a, b) => {
            let va = &nodes[*a].value;
            let vb = &nodes[*b].value;
            let na = norm(&va.data);
            let nb = norm(&vb.data);
            let c = nodes[i].value.data[0];
            let gv = g.data[0];
            acc(grads, *a, &mut |slot| {
                for ((s, &av), &bv) in slot.data.iter_mut().zip(&va.data).zip(&vb.data) {
                    *s += gv * (bv / (na * nb) - c * av / (na * na));
                }
            });
            acc(grads, *b, &mut |slot| {
                for ((s, &bv), &av) in slot.data.iter_mut().zip(&vb.data).zip(&va.data) {
                    *s += gv * (av / (na * nb) - c * bv / (nb * nb));
                }
            });
        }
        Op::Affine(a, coeff) => {
            let coeff = *coeff;
            acc(grads, *a, &mut |slot| slot.add_scaled(g, coeff));
        }
        Op::Clamp(a, lo, hi) => {
            let va = &nodes[*a].value;
            let (lo, hi) = (*lo, *hi);
            acc(grads, *a, &mut |slot| {
                for ((s, &gv), &xv) in slot.data.iter_mut().zip(&g.data).zip(&va.data) {
                    if xv >= lo && xv <= hi {
                        *s += gv;
                    }
                }
            });
        }
        Op::Row(m, row) => {
            let cols = g.data.len();
            let row = *row;
            acc(grads, *m, &mut |slot| {
                let dst = &mut slot.data[row * cols..(row + 1) * cols];
                for (s, &gv) in dst.iter_mut().zip(&g.data) {
                    *s += gv;
                }
            });
        }
        Op::Stack(inputs) => {
            for (k, &j) in inputs.iter().enumerate() {
                let gv = g.data[k];
                acc(grads, j, &mut |slot| slot.data[0] += gv);
            }
        }
        Op::Detach => {}
    }
}

/// Accumulates `scale * g` into `slot`, reducing when `slot` is scalar and
/// `g` is not (the broadcast case of add/sub).
fn add_broadcast(slot: &mut Tensor, g: &Tensor, scale: f64) {
    if slot.shape == g.shape {
        slot.add_scaled(g, scale);
    } else if slot.is_scalar() {
        slot.data[0] += scale * g.data.iter().sum::<f64>();
    } else {
        // g scalar broadcast onto a larger operand cannot happen: outputs
        // of broadcast ops take the larger shape
        unreachable!("gradient shape {:?} vs operand {:?}", g.shape, slot.shape);
    }
}

/// Backward of elementwise `z = a*b` into the slot for `a`, where `other`
/// holds b's value; handles the scalar-broadcast cases.
fn mul_backward(slot: &mut Tensor, g: &Tensor, other: &Tensor) {
    if slot.shape == g.shape && other.shape == g.shape {
        for ((s, &gv), &ov) in slot.data.iter_mut().zip(&g.data).zip(&other.data) {
            *s += gv * ov;
        }
    } else if slot.is_scalar() {
        // z = s * other, ds = sum(g . other)
        slot.data[0] += g.data.iter().zip(&other.data).map(|(&gv, &ov)| gv * ov).sum::<f64>();
    } else {
        // other is scalar: z = a * s
        let s = other.data[0];
        for (sl, &gv) in slot.data.iter_mut().zip(&g.data) {
            *sl += gv * s;
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.idx)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.idx)
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad(*self)
    }

    pub fn abs(self) -> Self {
        self.tape.abs(self)
    }

    pub fn exp(self) -> Self {
        self.tape.exp(self)
    }

    pub fn log(self) -> Self {
        self.tape.log(self)
    }

    pub fn sigmoid(self) -> Self {
        self.tape.sigmoid(self)
    }

    pub fn leaky_relu(self) -> Self {
        self.tape.leaky_relu(self)
    }

    pub fn sum(self) -> Self {
        self.tape.sum(self)
    }

    pub fn mean(self) -> Self {
        self.tape.mean(self)
    }

    pub fn scale(self, a: f64) -> Self {
        self.tape.affine(self, a, 0.0)
    }

    pub fn detach(self) -> Self {
        self.tape.detach(self)
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.add(self, rhs).expect("add")
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.sub(self, rhs).expect("sub")
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.mul(self, rhs).expect("mul")
    }
}

#[cfg(test)]
mod tests;
