//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Values are appended as
//! nodes; each node remembers the operation and parent nodes that produced
//! it, so append order is already a topological order and [`Tape::backward`]
//! only has to walk the nodes once in reverse.
//!
//! Nodes are only linked to their parents when at least one parent requires
//! a gradient. Everything computed purely from constants is recorded as a
//! constant, which is how frozen weights and anchor forwards stay out of the
//! backward pass.
//!
//! There is no implicit broadcasting. Row-vector and scalar broadcasts have
//! their own operations ([`Tape::add_row`], [`Tape::mul_row`],
//! [`Tape::scale_by`]).

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Build a matrix from equally sized rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Relu(Var),
    Sqrt(Var),
    Recip(Var),
    Softmax { x: Var },
    LogSoftmax(Var),
    LayerNorm { x: Var, eps: f64 },
    Rows(Var, Vec<usize>),
    ScatterAddRows { base: Var, rows: Vec<usize>, delta: Var },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Const => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulT(a, b) => vec![*a, *b],
            Op::ScatterAddRows { base, delta, .. } => vec![*base, *delta],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::LogSoftmax(a)
            | Op::Rows(a, _)
            | Op::Pick(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Softmax { x, .. } | Op::LayerNorm { x, .. } | Op::SliceCols { x, .. } => {
                vec![*x]
            }
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaf: Vec<bool>,
}

impl Gradients {
    /// Gradient of a leaf that requires grad. Intermediates and frozen
    /// leaves report `None`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if !self.leaf[v.0] {
            return None;
        }
        self.grads[v.0].as_deref()
    }

    /// Copy the gradient for `v` into `tensor.grad`, leaving it absent when
    /// `v` carries none.
    pub fn assign(&self, v: Var, tensor: &mut Tensor) {
        tensor.grad = self.get(v).map(|g| g.to_vec());
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a borrowed tensor. It participates in backward iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape.clone(),
            value: Cow::Borrowed(&tensor.data),
            op: if tensor.requires_grad {
                Op::Leaf
            } else {
                Op::Const
            },
            requires_grad: tensor.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Const))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy a node's value out as an owned, grad-free tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: Vec::new(),
            })
        }
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), data, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c))
    }

    /// Multiply every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.mismatch("scale_by", a, s));
        }
        let c = self.value(s)[0];
        let data = self.value(a).iter().map(|x| x * c).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::ScaleBy(a, s)))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, name: &'static str, mul: bool) -> Result<Var> {
        let (n, m) = dims2(self.shape(a));
        if self.value(row).len() != m || self.shape(row).len() != 1 {
            return Err(self.mismatch(name, a, row));
        }
        let r = self.value(row);
        let mut data = self.value(a).to_vec();
        for i in 0..n {
            for j in 0..m {
                if mul {
                    data[i * m + j] *= r[j];
                } else {
                    data[i * m + j] += r[j];
                }
            }
        }
        let op = if mul {
            Op::MulRow(a, row)
        } else {
            Op::AddRow(a, row)
        };
        Ok(self.push(self.shape(a).to_vec(), data, op))
    }

    /// `a[i, :] + row` for every row `i`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row", false)
    }

    /// `a[i, :] * row` (elementwise) for every row `i`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row", true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix("matmul", a)?;
        let (k2, m) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a), self.value(b), &mut out, n, k, m);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix("matmul_t", a)?;
        let (m, k2) = self.matrix("matmul_t", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..m {
                out[i * m + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(vec![n, m], out, Op::MatMulT(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(self.shape(a).to_vec(), data, Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| libm::sqrt(x)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| 1.0 / x).collect();
        self.push(self.shape(a).to_vec(), data, Op::Recip(a))
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (n, m) = dims2(self.shape(x));
        if causal && n > m {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                lhs: self.shape(x).to_vec(),
                rhs: Vec::new(),
            });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let width = if causal { i + 1 } else { m };
            softmax_slice(&xv[i * m..i * m + width], &mut out[i * m..i * m + width]);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x }))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; masked
    /// entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (n, m) = dims2(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let lse = log_sum_exp(row);
            for j in 0..m {
                out[i * m + j] = row[j] - lse;
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, m) = dims2(self.shape(x));
        let xv = self.value(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let (mean, var) = moments(row);
            let inv = 1.0 / libm::sqrt(var + eps);
            for j in 0..m {
                out[i * m + j] = (row[j] - mean) * inv;
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, eps })
    }

    fn rows_impl(&mut self, x: Var, rows: &[usize], op: &'static str) -> Result<Var> {
        let (n, m) = self.matrix(op, x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(if op == "embedding" {
                Error::TokenOutOfRange {
                    token: bad,
                    vocab: n,
                }
            } else {
                Error::ShapeMismatch {
                    op,
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![bad],
                }
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            out.extend_from_slice(&xv[r * m..(r + 1) * m]);
        }
        if rows.is_empty() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: Vec::new(),
            });
        }
        Ok(self.push(vec![rows.len(), m], out, Op::Rows(x, rows.to_vec())))
    }

    /// Select rows of a matrix by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.rows_impl(x, rows, "select_rows")
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.rows_impl(table, ids, "embedding")
    }

    /// `base` with `delta[i, :]` added into row `rows[i]`.
    pub fn scatter_add_rows(&mut self, base: Var, rows: &[usize], delta: Var) -> Result<Var> {
        let (n, m) = self.matrix("scatter_add_rows", base)?;
        let (k, m2) = self.matrix("scatter_add_rows", delta)?;
        if m != m2 || k != rows.len() || rows.iter().any(|&r| r >= n) {
            return Err(self.mismatch("scatter_add_rows", base, delta));
        }
        let mut out = self.value(base).to_vec();
        let dv = self.value(delta);
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..m {
                out[r * m + j] += dv[i * m + j];
            }
        }
        Ok(self.push(
            vec![n, m],
            out,
            Op::ScatterAddRows {
                base,
                rows: rows.to_vec(),
                delta,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_cols",
            lhs: Vec::new(),
            rhs: Vec::new(),
        })?;
        let (n, _) = self.matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pm) = self.matrix("concat_cols", p)?;
            if pn != n {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pm);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..n {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(vec![n, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_rows",
            lhs: Vec::new(),
            rhs: Vec::new(),
        })?;
        let (_, m) = self.matrix("concat_rows", first)?;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (pn, pm) = self.matrix("concat_rows", p)?;
            if pm != m {
                return Err(self.mismatch("concat_rows", first, p));
            }
            out.extend_from_slice(self.value(p));
            n += pn;
        }
        Ok(self.push(vec![n, m], out, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.matrix("slice_cols", x)?;
        if start >= end || end > m {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&xv[i * m + start..i * m + end]);
        }
        Ok(self.push(vec![n, w], out, Op::SliceCols { x, start }))
    }

    /// `x[i, cols[i]]` for every row, as a vector.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (n, m) = dims2(self.shape(x));
        if cols.len() != n || cols.iter().any(|&c| c >= m) {
            return Err(Error::ShapeMismatch {
                op: "pick",
                lhs: self.shape(x).to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let xv = self.value(x);
        let out = cols.iter().enumerate().map(|(i, &c)| xv[i * m + c]).collect();
        Ok(self.push(vec![n], out, Op::Pick(x, cols.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x))
    }

    /// Propagate gradients from a scalar `loss` to every node that requires
    /// grad. Nodes are visited once each, in reverse append order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: root.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let leaf = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf))
            .collect();
        Ok(Gradients { grads, leaf })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if want(*a) {
                    axpy(accumulate(&mut grads[a.0], g.len()), 1.0, g);
                }
                if want(*b) {
                    axpy(accumulate(&mut grads[b.0], g.len()), sign, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                if want(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    axpy(accumulate(&mut grads[a.0], g.len()), *c, g);
                }
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s)[0];
                if want(*a) {
                    axpy(accumulate(&mut grads[a.0], g.len()), c, g);
                }
                if want(*s) {
                    let d = dot(g, self.value(*a));
                    accumulate(&mut grads[s.0], 1)[0] += d;
                }
            }
            Op::AddRow(a, row) | Op::MulRow(a, row) => {
                let mul = matches!(node.op, Op::MulRow(..));
                let (n, m) = dims2(&node.shape);
                let rv = self.value(*row);
                let av = self.value(*a);
                if want(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += if mul { g[i * m + j] * rv[j] } else { g[i * m + j] };
                        }
                    }
                }
                if want(*row) {
                    let gr = accumulate(&mut grads[row.0], m);
                    for i in 0..n {
                        for j in 0..m {
                            gr[j] += if mul { g[i * m + j] * av[i * m + j] } else { g[i * m + j] };
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.shape(*a));
                let m = node.shape[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    // dA = G · Bᵀ
                    let ga = accumulate(&mut grads[a.0], n * k);
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            ga[i * k + p] += dot(gr, &bv[p * m..(p + 1) * m]);
                        }
                    }
                }
                if want(*b) {
                    // dB = Aᵀ · G
                    let gb = accumulate(&mut grads[b.0], k * m);
                    for i in 0..n {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip != 0.0 {
                                axpy(&mut gb[p * m..(p + 1) * m], a_ip, &g[i * m..(i + 1) * m]);
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (n, k) = dims2(self.shape(*a));
                let m = node.shape[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    // dA = G · B
                    let ga = accumulate(&mut grads[a.0], n * k);
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij != 0.0 {
                                axpy(&mut ga[i * k..(i + 1) * k], gij, &bv[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
                if want(*b) {
                    // dB = Gᵀ · A
                    let gb = accumulate(&mut grads[b.0], m * k);
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij != 0.0 {
                                axpy(&mut gb[j * k..(j + 1) * k], gij, &av[i * k..(i + 1) * k]);
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    let av = self.value(*a);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for k in 0..g.len() {
                        if av[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::Sqrt(a) => {
                if want(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] / (2.0 * node.value[k]);
                    }
                }
            }
            Op::Recip(a) => {
                if want(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for k in 0..g.len() {
                        ga[k] -= g[k] * node.value[k] * node.value[k];
                    }
                }
            }
            Op::Softmax { x, .. } => {
                if want(*x) {
                    let (n, m) = dims2(&node.shape);
                    let y = &node.value;
                    let gx = accumulate(&mut grads[x.0], n * m);
                    for i in 0..n {
                        let r = i * m..(i + 1) * m;
                        let s = dot(&g[r.clone()], &y[r.clone()]);
                        for j in r {
                            gx[j] += y[j] * (g[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if want(*x) {
                    let (n, m) = dims2(&node.shape);
                    let y = &node.value;
                    let gx = accumulate(&mut grads[x.0], n * m);
                    for i in 0..n {
                        let r = i * m..(i + 1) * m;
                        let s: f64 = g[r.clone()].iter().sum();
                        for j in r {
                            gx[j] += g[j] - libm::exp(y[j]) * s;
                        }
                    }
                }
            }
            Op::LayerNorm { x, eps } => {
                if want(*x) {
                    let (n, m) = dims2(&node.shape);
                    let xv = self.value(*x);
                    let y = &node.value;
                    let gx = accumulate(&mut grads[x.0], n * m);
                    for i in 0..n {
                        let r = i * m..(i + 1) * m;
                        let (_, var) = moments(&xv[r.clone()]);
                        let inv = 1.0 / libm::sqrt(var + eps);
                        let gm = g[r.clone()].iter().sum::<f64>() / m as f64;
                        let gy = dot(&g[r.clone()], &y[r.clone()]) / m as f64;
                        for j in r {
                            gx[j] += inv * (g[j] - gm - y[j] * gy);
                        }
                    }
                }
            }
            Op::Rows(x, rows) => {
                if want(*x) {
                    let m = node.shape[1];
                    let gx = accumulate(&mut grads[x.0], len(*x));
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut gx[r * m..(r + 1) * m], 1.0, &g[i * m..(i + 1) * m]);
                    }
                }
            }
            Op::ScatterAddRows { base, rows, delta } => {
                let m = node.shape[1];
                if want(*base) {
                    axpy(accumulate(&mut grads[base.0], g.len()), 1.0, g);
                }
                if want(*delta) {
                    let gd = accumulate(&mut grads[delta.0], rows.len() * m);
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut gd[i * m..(i + 1) * m], 1.0, &g[r * m..(r + 1) * m]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = dims2(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if want(p) {
                        let gp = accumulate(&mut grads[p.0], n * w);
                        for i in 0..n {
                            axpy(
                                &mut gp[i * w..(i + 1) * w],
                                1.0,
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let l = len(p);
                    if want(p) {
                        axpy(accumulate(&mut grads[p.0], l), 1.0, &g[offset..offset + l]);
                    }
                    offset += l;
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let (n, w) = dims2(&node.shape);
                    let m = self.shape(*x)[1];
                    let gx = accumulate(&mut grads[x.0], n * m);
                    for i in 0..n {
                        axpy(&mut gx[i * m + start..i * m + start + w], 1.0, &g[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::Pick(x, cols) => {
                if want(*x) {
                    let m = dims2(self.shape(*x)).1;
                    let gx = accumulate(&mut grads[x.0], len(*x));
                    for (i, &c) in cols.iter().enumerate() {
                        gx[i * m + c] += g[i];
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if want(*x) {
                    let l = len(*x);
                    let c = if matches!(node.op, Op::Mean(_)) {
                        g[0] / l as f64
                    } else {
                        g[0]
                    };
                    for v in accumulate(&mut grads[x.0], l).iter_mut() {
                        *v += c;
                    }
                }
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(orow, a_ip, &b[p * m..(p + 1) * m]);
            }
        }
    }
}

fn moments(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
    (mean, var)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>())
}

pub(crate) fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = libm::exp(v - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let col = Tensor::from_rows(&[&[2.0], &[3.0]]).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(&eye), tape.leaf(&col));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.value(c), &[2.0, 3.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let raw = [0.3, -1.7, 2.2, 0.05, 4.1, -0.6, 1.3, -2.9];
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 8], raw.to_vec()).unwrap();
        let y = tape.layer_norm(x, 0.0);
        let v = tape.value(y);
        let mean = v.iter().sum::<f64>() / 8.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![1.0, 5.0, 1.0, 1.0]).unwrap();
        let y = tape.causal_softmax(x).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(alloc::format!("{err}").contains("matmul"));
        let c = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        assert!(tape.add(a, c).is_err());
        assert!(matches!(
            tape.embedding(a, &[5]),
            Err(Error::TokenOutOfRange { token: 5, vocab: 2 })
        ));
    }

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().trainable();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn frozen_leaf_has_no_grad() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().trainable();
        let frozen = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(&x), tape.leaf(&frozen));
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(b).is_none());
        let mut t = frozen.clone();
        grads.assign(b, &mut t);
        assert!(t.grad.is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().trainable();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn constants_do_not_link_parents() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.add(a, a).unwrap();
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }
}
