//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tensor`] is an immutable value node. Operations build a DAG whose
//! nodes keep their parents alive through reference counting; calling
//! [`Tensor::backward`] on a scalar walks that DAG once in reverse
//! topological order and accumulates `d loss / d node` into every node that
//! requires a gradient.
//!
//! Nodes that do not depend on any gradient-requiring leaf are stored as
//! plain constants, so evaluation-only forward passes build no graph.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Supported operation kinds for the generic [`apply`] entry point.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Subtract,
    Multiply,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softmax(usize),
    LogSoftmax(usize),
    Mean,
    Sum,
    SquaredL2,
    L1,
    Concat(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    /// rhs matches the trailing dimensions of lhs and repeats over rows.
    Row,
    /// rhs holds a single value.
    Scalar,
}

enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor, Bcast),
    Sub(Tensor, Tensor, Bcast),
    Mul(Tensor, Tensor, Bcast),
    Scale(Tensor, f64),
    Shift(Tensor),
    Relu(Tensor),
    LeakyRelu(Tensor, f64),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Softmax(Tensor, usize),
    LogSoftmax(Tensor, usize),
    Sum(Tensor),
    Mean(Tensor),
    SumAxis(Tensor, usize),
    SquaredL2(Tensor),
    L1(Tensor),
    Concat(Vec<Tensor>, usize),
    Transpose(Tensor),
    SliceCols(Tensor, usize),
    SelectRows(Tensor, Vec<usize>),
    Clamp(Tensor, f64, f64),
    SqDist(Tensor, Tensor),
    LogMeanExp(Tensor),
    RmsNorm(Tensor, f64),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b, _) | Sub(a, b, _) | Mul(a, b, _) | SqDist(a, b) => vec![a, b],
            Scale(a, _)
            | Shift(a)
            | Relu(a)
            | LeakyRelu(a, _)
            | Sigmoid(a)
            | Tanh(a)
            | Exp(a)
            | Log(a)
            | Softmax(a, _)
            | LogSoftmax(a, _)
            | Sum(a)
            | Mean(a)
            | SumAxis(a, _)
            | SquaredL2(a)
            | L1(a)
            | Transpose(a)
            | SliceCols(a, _)
            | SelectRows(a, _)
            | Clamp(a, _, _)
            | LogMeanExp(a)
            | RmsNorm(a, _) => vec![a],
            Concat(parts, _) => parts.iter().collect(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

/// Dense row-major tensor with an attached gradient slot.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &self.0.data)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, len, inner) strides for reductions along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

impl Tensor {
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Node {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op: Op::Leaf,
        })))
    }

    /// Constant tensor that never receives a gradient.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(shape.to_vec(), data, false)
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(shape.to_vec(), data, true)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_op(vec![], vec![value], Op::Leaf)
    }

    pub fn vector(data: &[f64]) -> Tensor {
        Tensor::from_op(vec![data.len()], data.to_vec(), Op::Leaf)
    }

    /// Constant `rows x cols` matrix from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(&[rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_op(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    pub fn rows(&self) -> usize {
        self.0.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.0.shape.len() {
            0 => 1,
            1 => self.0.shape[0],
            _ => numel(&self.0.shape[1..]),
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_op(self.0.shape.clone(), self.0.data.clone(), Op::Leaf)
    }

    fn is_scalar_like(&self) -> bool {
        self.numel() == 1 && self.0.shape.len() <= 1
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.0.data.iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.0.shape.clone(), data, op)
    }

    fn broadcast_kind(&self, rhs: &Tensor, op: &'static str) -> Result<Bcast> {
        if self.0.shape == rhs.0.shape {
            Ok(Bcast::Same)
        } else if rhs.numel() == 1 && rhs.0.shape.len() <= 2 {
            Ok(Bcast::Scalar)
        } else if self.0.shape.len() >= 2
            && (rhs.0.shape == self.0.shape[1..]
                || (rhs.0.shape.len() == self.0.shape.len()
                    && rhs.0.shape[0] == 1
                    && rhs.0.shape[1..] == self.0.shape[1..]))
        {
            Ok(Bcast::Row)
        } else {
            Err(Error::dim(
                op,
                format!("cannot combine shapes {:?} and {:?}", self.0.shape, rhs.0.shape),
            ))
        }
    }

    fn binary(
        &self,
        rhs: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Tensor, Tensor, Bcast) -> Op,
    ) -> Result<Tensor> {
        let kind = self.broadcast_kind(rhs, name)?;
        let a = &self.0.data;
        let b = &rhs.0.data;
        let data: Vec<f64> = match kind {
            Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => a.iter().map(|&x| f(x, b[0])).collect(),
            Bcast::Row => {
                let w = b.len();
                a.iter().enumerate().map(|(i, &x)| f(x, b[i % w])).collect()
            }
        };
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            data,
            make(self.clone(), rhs.clone(), kind),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "subtract", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "multiply", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|v| v * c, Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|v| v + c, Op::Shift(self.clone()))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (&self.0.shape, &rhs.0.shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", sa, sb),
            ));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.0.data, &rhs.0.data, n, k, m);
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            Op::MatMul(self.clone(), rhs.clone()),
        ))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|v| v.max(0.0), Op::Relu(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(self.clone(), slope),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, Op::Tanh(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.0.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(f64::ln, Op::Log(self.clone())))
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.0.shape.len() {
            return Err(Error::dim(
                op,
                format!("axis {axis} out of range for shape {:?}", self.0.shape),
            ));
        }
        Ok(())
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "softmax")?;
        let data = softmax_raw(&self.0.data, &self.0.shape, axis, false);
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            data,
            Op::Softmax(self.clone(), axis),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "log_softmax")?;
        let data = softmax_raw(&self.0.data, &self.0.shape, axis, true);
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            data,
            Op::LogSoftmax(self.clone(), axis),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.0.data.iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum(self.clone()))
    }

    /// Mean over all elements. The mean of an empty tensor is 0.
    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let s: f64 = self.0.data.iter().sum();
        Tensor::from_op(vec![], vec![s / n], Op::Mean(self.clone()))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "sum_axis")?;
        let (outer, len, inner) = axis_split(&self.0.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += self.0.data[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = self.0.shape.clone();
        shape.remove(axis);
        Ok(Tensor::from_op(shape, data, Op::SumAxis(self.clone(), axis)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "mean_axis")?;
        let len = self.0.shape[axis].max(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Sum of squares.
    pub fn squared_l2(&self) -> Tensor {
        let s = self.0.data.iter().map(|v| v * v).sum();
        Tensor::from_op(vec![], vec![s], Op::SquaredL2(self.clone()))
    }

    /// Sum of absolute values.
    pub fn l1(&self) -> Tensor {
        let s = self.0.data.iter().map(|v| v.abs()).sum();
        Tensor::from_op(vec![], vec![s], Op::L1(self.clone()))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        first.check_axis(axis, "concat")?;
        let rank = first.0.shape.len();
        for p in parts {
            let ok = p.0.shape.len() == rank
                && p.0
                    .shape
                    .iter()
                    .zip(&first.0.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                let shapes: Vec<_> = parts.iter().map(|p| p.0.shape.clone()).collect();
                return Err(Error::dim(
                    "concat",
                    format!("incompatible shapes {shapes:?} along axis {axis}"),
                ));
            }
        }
        let outer = numel(&first.0.shape[..axis]);
        let inner = numel(&first.0.shape[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.0.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.0.shape[axis] * inner;
                data.extend_from_slice(&p.0.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.0.shape.clone();
        shape[axis] = total;
        Ok(Tensor::from_op(shape, data, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = &self.0.shape;
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = self.0.data[i * m + j];
            }
        }
        Ok(Tensor::from_op(vec![m, n], data, Op::Transpose(self.clone())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let s = &self.0.shape;
        if s.len() != 2 || start > end || end > s[1] {
            return Err(Error::dim(
                "slice_cols",
                format!("range {start}..{end} invalid for shape {s:?}"),
            ));
        }
        let (n, m) = (s[0], s[1]);
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&self.0.data[i * m + start..i * m + end]);
        }
        Ok(Tensor::from_op(
            vec![n, w],
            data,
            Op::SliceCols(self.clone(), start),
        ))
    }

    /// Gathers rows (first-axis slices) by index; repeats are allowed.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let s = &self.0.shape;
        if s.is_empty() {
            return Err(Error::dim("select_rows", "scalar has no rows"));
        }
        let width = numel(&s[1..]);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::dim(
                    "select_rows",
                    format!("row {i} out of range for shape {s:?}"),
                ));
            }
            data.extend_from_slice(&self.0.data[i * width..(i + 1) * width]);
        }
        let mut shape = s.clone();
        shape[0] = indices.len();
        Ok(Tensor::from_op(
            shape,
            data,
            Op::SelectRows(self.clone(), indices.to_vec()),
        ))
    }

    /// Contiguous rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end {
            return Err(Error::dim("slice_rows", format!("empty range {start}..{end}")));
        }
        self.select_rows(&(start..end).collect::<Vec<_>>())
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|v| v.clamp(lo, hi), Op::Clamp(self.clone(), lo, hi))
    }

    /// Pairwise squared Euclidean distances between the rows of two matrices.
    pub fn sq_dist(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (&self.0.shape, &other.0.shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(
                "sq_dist",
                format!("row widths differ: {sa:?} vs {sb:?}"),
            ));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (a, b) = (&self.0.data, &other.0.data);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let ai = &a[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &b[j * d..(j + 1) * d];
                data[i * m + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        Ok(Tensor::from_op(
            vec![n, m],
            data,
            Op::SqDist(self.clone(), other.clone()),
        ))
    }

    /// `log(mean(exp(x)))` over all elements, computed with max-subtraction.
    pub fn log_mean_exp(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(Error::dim("log_mean_exp", "empty input"));
        }
        let m = self.0.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = self.0.data.iter().map(|v| (v - m).exp()).sum();
        let v = m + (s / self.numel() as f64).ln();
        Ok(Tensor::from_op(vec![], vec![v], Op::LogMeanExp(self.clone())))
    }

    /// Scales each row of a matrix to unit root-mean-square:
    /// `x / sqrt(mean(x^2) + eps)`.
    pub fn rms_normalize(&self, eps: f64) -> Result<Tensor> {
        let s = &self.0.shape;
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::dim("rms_normalize", format!("expected a matrix, got {s:?}")));
        }
        let m = s[1];
        let mut data = Vec::with_capacity(self.numel());
        for row in self.0.data.chunks_exact(m) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() / m as f64 + eps).sqrt();
            data.extend(row.iter().map(|v| v / n));
        }
        Ok(Tensor::from_op(s.clone(), data, Op::RmsNorm(self.clone(), eps)))
    }

    /// Reverse-mode sweep from a scalar. Gradients are summed into the grad
    /// slot of every reachable node that requires one; the seed is 1.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar_like() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.0.shape
            )));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), vec![1.0]);
        for t in order.iter().rev() {
            let key = Rc::as_ptr(&t.0);
            let Some(g) = grads.remove(&key) else { continue };
            t.propagate(&g, &mut grads);
            let mut slot = t.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order DFS; each node appears once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents() {
                if p.0.requires_grad && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    /// Pushes this node's upstream gradient `g` to its parents.
    fn propagate(&self, g: &[f64], grads: &mut HashMap<*const Node, Vec<f64>>) {
        let mut send = |t: &Tensor, contrib: Vec<f64>| {
            if !t.0.requires_grad {
                return;
            }
            grads
                .entry(Rc::as_ptr(&t.0))
                .and_modify(|acc| acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b))
                .or_insert(contrib);
        };
        let out = &self.0.data;
        match &self.0.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (a.0.shape[0], a.0.shape[1]);
                let m = b.0.shape[1];
                if a.0.requires_grad {
                    // dA = G B^T
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * b.0.data[p * m + j];
                            }
                        }
                    }
                    send(a, da);
                }
                if b.0.requires_grad {
                    // dB = A^T G
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let aip = a.0.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                db[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                    send(b, db);
                }
            }
            Op::Add(a, b, kind) => {
                send(a, g.to_vec());
                if b.0.requires_grad {
                    send(b, reduce_broadcast(g, b.numel(), *kind));
                }
            }
            Op::Sub(a, b, kind) => {
                send(a, g.to_vec());
                if b.0.requires_grad {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    send(b, reduce_broadcast(&neg, b.numel(), *kind));
                }
            }
            Op::Mul(a, b, kind) => {
                let w = b.numel();
                let bv = |i: usize| match kind {
                    Bcast::Same => b.0.data[i],
                    Bcast::Scalar => b.0.data[0],
                    Bcast::Row => b.0.data[i % w],
                };
                if a.0.requires_grad {
                    send(a, g.iter().enumerate().map(|(i, gi)| gi * bv(i)).collect());
                }
                if b.0.requires_grad {
                    let full: Vec<f64> =
                        g.iter().zip(&a.0.data).map(|(gi, ai)| gi * ai).collect();
                    send(b, reduce_broadcast(&full, w, *kind));
                }
            }
            Op::Scale(a, c) => send(a, g.iter().map(|v| v * c).collect()),
            Op::Shift(a) => send(a, g.to_vec()),
            Op::Relu(a) => send(
                a,
                g.iter()
                    .zip(&a.0.data)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect(),
            ),
            Op::LeakyRelu(a, slope) => send(
                a,
                g.iter()
                    .zip(&a.0.data)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { gi * slope })
                    .collect(),
            ),
            Op::Sigmoid(a) => send(
                a,
                g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect(),
            ),
            Op::Tanh(a) => send(
                a,
                g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect(),
            ),
            Op::Exp(a) => send(a, g.iter().zip(out).map(|(gi, y)| gi * y).collect()),
            Op::Log(a) => send(
                a,
                g.iter().zip(&a.0.data).map(|(gi, x)| gi / x).collect(),
            ),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(&a.0.shape, *axis);
                let mut da = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..len {
                            da[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                send(a, da);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_split(&a.0.shape, *axis);
                let mut da = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let gsum: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            da[idx(j)] = g[idx(j)] - out[idx(j)].exp() * gsum;
                        }
                    }
                }
                send(a, da);
            }
            Op::Sum(a) => send(a, vec![g[0]; a.numel()]),
            Op::Mean(a) => {
                let n = a.numel().max(1) as f64;
                send(a, vec![g[0] / n; a.numel()]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(&a.0.shape, *axis);
                let mut da = vec![0.0; a.numel()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            da[(o * len + j) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                send(a, da);
            }
            Op::SquaredL2(a) => send(a, a.0.data.iter().map(|x| 2.0 * x * g[0]).collect()),
            Op::L1(a) => send(
                a,
                a.0.data
                    .iter()
                    .map(|&x| {
                        if x > 0.0 {
                            g[0]
                        } else if x < 0.0 {
                            -g[0]
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::Concat(parts, axis) => {
                let outer = numel(&parts[0].0.shape[..*axis]);
                let inner = numel(&parts[0].0.shape[*axis + 1..]);
                let total: usize = parts.iter().map(|p| p.0.shape[*axis]).sum();
                let mut offset = 0;
                for p in parts {
                    let chunk = p.0.shape[*axis] * inner;
                    if p.0.requires_grad {
                        let mut dp = Vec::with_capacity(p.numel());
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            dp.extend_from_slice(&g[start..start + chunk]);
                        }
                        send(p, dp);
                    }
                    offset += chunk;
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (a.0.shape[0], a.0.shape[1]);
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        da[i * m + j] = g[j * n + i];
                    }
                }
                send(a, da);
            }
            Op::SliceCols(a, start) => {
                let (n, m) = (a.0.shape[0], a.0.shape[1]);
                let w = self.0.shape[1];
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    da[i * m + start..i * m + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                send(a, da);
            }
            Op::SelectRows(a, indices) => {
                let width = numel(&a.0.shape[1..]);
                let mut da = vec![0.0; a.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..width {
                        da[i * width + c] += g[r * width + c];
                    }
                }
                send(a, da);
            }
            Op::Clamp(a, lo, hi) => send(
                a,
                g.iter()
                    .zip(&a.0.data)
                    .map(|(gi, &x)| if x < *lo || x > *hi { 0.0 } else { *gi })
                    .collect(),
            ),
            Op::SqDist(a, b) => {
                let (n, m, d) = (a.0.shape[0], b.0.shape[0], a.0.shape[1]);
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = 2.0 * gij * (a.0.data[i * d + c] - b.0.data[j * d + c]);
                            da[i * d + c] += diff;
                            db[j * d + c] -= diff;
                        }
                    }
                }
                if a.0.requires_grad {
                    send(a, da);
                }
                if b.0.requires_grad {
                    send(b, db);
                }
            }
            Op::LogMeanExp(a) => {
                // d/dx_i log(mean exp x) = softmax(x)_i
                let y = out[0];
                let n = a.numel() as f64;
                send(
                    a,
                    a.0.data
                        .iter()
                        .map(|x| g[0] * (x - y).exp() / n)
                        .collect(),
                );
            }
            Op::RmsNorm(a, eps) => {
                // y = x / n, n = sqrt(|x|^2 / m + eps):
                // dx = g / n - x (g . x) / (m n^3)
                let m = a.0.shape[1];
                let mut dx = Vec::with_capacity(a.numel());
                for (row, gr) in a.0.data.chunks_exact(m).zip(g.chunks_exact(m)) {
                    let n = (row.iter().map(|v| v * v).sum::<f64>() / m as f64 + eps).sqrt();
                    let gx: f64 = row.iter().zip(gr).map(|(x, g)| x * g).sum();
                    let c = gx / (m as f64 * n * n * n);
                    dx.extend(row.iter().zip(gr).map(|(x, g)| g / n - x * c));
                }
                send(a, dx);
            }
        }
    }
}

fn reduce_broadcast(g: &[f64], width: usize, kind: Bcast) -> Vec<f64> {
    match kind {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().sum()],
        Bcast::Row => {
            let mut out = vec![0.0; width];
            for (i, v) in g.iter().enumerate() {
                out[i % width] += v;
            }
            out
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

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn softmax_raw(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|j| (x[idx(j)] - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..len {
                out[idx(j)] = if log {
                    x[idx(j)] - lse
                } else {
                    (x[idx(j)] - max).exp() / sum
                };
            }
        }
    }
    out
}

/// Generic dispatch over [`OpKind`]. Binary kinds take exactly two inputs,
/// `Concat` takes one or more, all others exactly one.
pub fn apply(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(Error::dim(
                "apply",
                format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    };
    match kind {
        OpKind::MatMul => {
            arity(2)?;
            inputs[0].matmul(inputs[1])
        }
        OpKind::Add => {
            arity(2)?;
            inputs[0].add(inputs[1])
        }
        OpKind::Subtract => {
            arity(2)?;
            inputs[0].sub(inputs[1])
        }
        OpKind::Multiply => {
            arity(2)?;
            inputs[0].mul(inputs[1])
        }
        OpKind::Concat(axis) => {
            let parts: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
            Tensor::concat(&parts, *axis)
        }
        unary => {
            arity(1)?;
            let x = inputs[0];
            match unary {
                OpKind::Relu => Ok(x.relu()),
                OpKind::LeakyRelu(s) => Ok(x.leaky_relu(*s)),
                OpKind::Sigmoid => Ok(x.sigmoid()),
                OpKind::Tanh => Ok(x.tanh()),
                OpKind::Exp => Ok(x.exp()),
                OpKind::Log => x.log(),
                OpKind::Softmax(a) => x.softmax(*a),
                OpKind::LogSoftmax(a) => x.log_softmax(*a),
                OpKind::Mean => Ok(x.mean()),
                OpKind::Sum => Ok(x.sum()),
                OpKind::SquaredL2 => Ok(x.squared_l2()),
                OpKind::L1 => Ok(x.l1()),
                _ => unreachable!(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::vector(&[0.0, 0.0]);
        assert_eq!(x.softmax(0).unwrap().values(), &[0.5, 0.5]);
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let x = Tensor::vector(&[-1.0]);
        assert!((x.leaky_relu(0.2).item() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap().values(), a.values());
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn log_rejects_non_positive() {
        let x = Tensor::vector(&[1.0, 0.0]);
        assert!(matches!(x.log(), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn grad_of_mean_relu() {
        let x = Tensor::param(&[2], vec![-1.0, 2.0]).unwrap();
        x.relu().mean().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.5]);
    }

    #[test]
    fn log_softmax_pick_grad_is_onehot_minus_softmax() {
        let xs = [0.3, -1.2, 2.0, 0.5];
        let k = 2;
        let x = Tensor::param(&[4], xs.to_vec()).unwrap();
        let pick = Tensor::vector(&[0.0, 0.0, 1.0, 0.0]);
        x.log_softmax(0).unwrap().mul(&pick).unwrap().sum().backward().unwrap();
        let sm = Tensor::vector(&xs).softmax(0).unwrap();
        let expected: Vec<f64> = (0..4)
            .map(|i| if i == k { 1.0 } else { 0.0 } - sm.values()[i])
            .collect();
        assert!(close(&x.grad().unwrap(), &expected, 1e-12));

        // central differences, eps = 1e-6
        let f = |v: &[f64]| {
            let t = Tensor::vector(v);
            t.log_softmax(0).unwrap().values()[k]
        };
        for i in 0..4 {
            let mut p = xs.to_vec();
            let mut m = xs.to_vec();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - expected[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.relu().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates_over_paths() {
        // y = x*x + x, reached twice through x
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn row_broadcast_bias_gradient_sums_rows() {
        let a = Tensor::param(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::param(&[2], vec![0.5, -0.5]).unwrap();
        a.add(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse_in_value() {
        let a = Tensor::matrix(2, 1, vec![1., 2.]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3., 4., 5., 6.]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.values(), &[1., 3., 4., 2., 5., 6.]);
        assert_eq!(c.slice_cols(1, 3).unwrap().values(), b.values());
    }

    #[test]
    fn constants_build_no_graph() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let y = a.exp().sum();
        assert!(!y.requires_grad());
        y.backward().unwrap();
        assert!(a.grad().is_none());
    }

    #[test]
    fn apply_dispatch_matches_methods() {
        let x = Tensor::vector(&[0.1, -0.4]);
        let via = apply(&OpKind::Tanh, &[&x]).unwrap();
        assert_eq!(via.values(), x.tanh().values());
        assert!(apply(&OpKind::Add, &[&x]).is_err());
    }

    #[test]
    fn rms_normalize_unit_rows_and_gradient() {
        let x = Tensor::matrix(2, 3, vec![3.0, -4.0, 0.5, 0.1, 0.2, -0.3]).unwrap();
        let y = x.rms_normalize(0.0).unwrap();
        for row in y.values().chunks(3) {
            let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / 3.0;
            assert!((ms - 1.0).abs() < 1e-12);
        }
        let w = Tensor::matrix(2, 3, vec![0.3, -1.1, 0.7, 2.0, 0.4, -0.9]).unwrap();
        let err = crate::gradcheck::grad_check(
            |p| Ok(p.rms_normalize(1e-6)?.mul(&w)?.sum()),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
