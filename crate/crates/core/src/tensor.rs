//! Dense 1-D/2-D tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation performed on the [`Tensor`] handles it
//! owns (define-by-run). Calling [`Tensor::backward`] on a scalar node walks
//! the tape in reverse and accumulates gradients into every node that
//! requires them. A tape is consumed by its backward pass; training code
//! builds a fresh tape per forward/backward step.
//!
//! Values are 64-bit floats. Operations validate shapes up front and, unless
//! disabled via [`Tape::set_finite_checks`], reject non-finite outputs at op
//! boundaries so NaN/Inf problems surface where they are introduced.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} is fully masked")]
    DegenerateMask { row: usize },
    #[error("log of non-positive value")]
    LogDomain,
    #[error("index out of range in {op}: {detail}")]
    IndexOutOfRange { op: &'static str, detail: String },
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Operation recorded on the tape. Variants carry parent node ids plus
/// whatever the backward rule needs beyond the parents' stored values.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    /// out = mul * x + add, elementwise (the constant has zero derivative).
    Affine { src: usize, mul: f64 },
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    Clamp { src: usize, lo: f64, hi: f64 },
    SoftmaxRows { src: usize },
    Sum(usize),
    MeanCols(usize),
    MaxCols { src: usize, argmax: Vec<usize> },
    SelectColumn { src: usize, col: usize },
    HStack(Vec<usize>),
    Reshape(usize),
    /// out[t, :] = table[ids[t], :]
    GatherRows { table: usize, ids: Vec<usize> },
    /// out[0, j] = sum_i a[i, j] * b[i, j]
    ColwiseDot(usize, usize),
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    check_finite: bool,
    corrupt_tanh: bool,
    consumed: bool,
}

/// Recording tape. Cloning is cheap and refers to the same underlying tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                check_finite: true,
                corrupt_tanh: false,
                consumed: false,
            })),
        }
    }

    /// Disable (or re-enable) the NaN/Inf scan at op boundaries.
    pub fn set_finite_checks(&self, on: bool) {
        self.inner.borrow_mut().check_finite = on;
    }

    /// Test fixture: scale the tanh backward rule so gradient checks
    /// detect a corrupted derivative.
    pub fn set_corrupt_tanh(&self, on: bool) {
        self.inner.borrow_mut().corrupt_tanh = on;
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Register a gradient-tracked leaf tensor.
    pub fn leaf(&self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        self.push_leaf(rows, cols, values, true)
    }

    /// Register a constant (no gradient) leaf tensor.
    pub fn constant(&self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        self.push_leaf(rows, cols, values, false)
    }

    pub fn scalar(&self, value: f64) -> Result<Tensor> {
        self.constant(1, 1, vec![value])
    }

    fn push_leaf(&self, rows: usize, cols: usize, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if values.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                detail: format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, values.len()),
            });
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::Usage("tape already consumed by backward".into()));
        }
        if inner.check_finite && values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node { rows, cols, values, grad: None, requires_grad, op: Op::Leaf });
        drop(inner);
        Ok(Tensor { tape: self.clone(), id, rows, cols })
    }

    fn push_op(&self, rows: usize, cols: usize, values: Vec<f64>, op: Op, op_name: &'static str, requires_grad: bool) -> Result<Tensor> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::Usage("tape already consumed by backward".into()));
        }
        if inner.check_finite && values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node { rows, cols, values, grad: None, requires_grad, op });
        drop(inner);
        Ok(Tensor { tape: self.clone(), id, rows, cols })
    }
}

/// Handle to one node on a [`Tape`]. Cloning aliases the same node.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={}x{})", self.id, self.rows, self.cols)
    }
}

/// Row-major matrix product: a (m x k) * b (k x n) accumulated into out (m x n).
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn transpose_into(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The tape this tensor lives on (cheap clone of a shared handle).
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].values.clone()
    }

    /// Value of a 1x1 tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.tape.inner.borrow().nodes[self.id].values[0]
    }

    /// Gradient accumulated by the last backward pass, if any reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    fn same_tape(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].values)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        {
            let inner = self.tape.inner.borrow();
            matmul_acc(&inner.nodes[self.id].values, &inner.nodes[other.id].values, &mut out, m, k, n);
        }
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push_op(m, n, out, Op::Matmul(self.id, other.id), "matmul", rg)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let out = self.with_values(|v| transpose_into(v, self.rows, self.cols));
        self.tape.push_op(self.cols, self.rows, out, Op::Transpose(self.id), "transpose", self.requires_grad())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    fn binary_elementwise(&self, other: &Tensor, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Tensor> {
        self.same_tape(other)?;
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let out = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].values;
            let b = &inner.nodes[other.id].values;
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push_op(self.rows, self.cols, out, op, name, rg)
    }

    /// Elementwise `mul * x + add`. Covers scaling, negation and `1 - x`.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Tensor> {
        let out = self.with_values(|v| v.iter().map(|&x| mul * x + add).collect());
        self.tape.push_op(self.rows, self.cols, out, Op::Affine { src: self.id, mul }, "affine", self.requires_grad())
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        self.affine(k, 0.0)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let out = self.with_values(|v| v.iter().map(|&x| x.tanh()).collect());
        self.tape.push_op(self.rows, self.cols, out, Op::Tanh(self.id), "tanh", self.requires_grad())
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let out = self.with_values(|v| v.iter().map(|&x| sigmoid(x)).collect());
        self.tape.push_op(self.rows, self.cols, out, Op::Sigmoid(self.id), "sigmoid", self.requires_grad())
    }

    pub fn log(&self) -> Result<Tensor> {
        let bad = self.with_values(|v| v.iter().any(|&x| x <= 0.0));
        if bad {
            return Err(TensorError::LogDomain);
        }
        let out = self.with_values(|v| v.iter().map(|&x| x.ln()).collect());
        self.tape.push_op(self.rows, self.cols, out, Op::Log(self.id), "log", self.requires_grad())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        let out = self.with_values(|v| v.iter().map(|&x| x.clamp(lo, hi)).collect());
        self.tape.push_op(self.rows, self.cols, out, Op::Clamp { src: self.id, lo, hi }, "clamp", self.requires_grad())
    }

    /// Row-wise softmax, numerically stabilized by row-max subtraction.
    ///
    /// `mask`, when given, must have one entry per element; `false` entries
    /// are excluded from the softmax and come out exactly zero. A fully
    /// masked row is an error.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        let (r, c) = self.shape();
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    detail: format!("mask has {} entries for {}x{} tensor", m.len(), r, c),
                });
            }
        }
        let mut out = vec![0.0; r * c];
        {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].values;
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                let live = |j: usize| mask.map_or(true, |m| m[i * c + j]);
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..c {
                    if live(j) && row[j] > maxv {
                        maxv = row[j];
                    }
                }
                if maxv == f64::NEG_INFINITY {
                    return Err(TensorError::DegenerateMask { row: i });
                }
                let mut sum = 0.0;
                for j in 0..c {
                    if live(j) {
                        let e = (row[j] - maxv).exp();
                        out[i * c + j] = e;
                        sum += e;
                    }
                }
                for j in 0..c {
                    out[i * c + j] /= sum;
                }
            }
        }
        self.tape.push_op(
            r,
            c,
            out,
            Op::SoftmaxRows { src: self.id },
            "softmax_rows",
            self.requires_grad(),
        )
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s = self.with_values(|v| v.iter().sum());
        self.tape.push_op(1, 1, vec![s], Op::Sum(self.id), "sum", self.requires_grad())
    }

    /// Column-wise mean: r x c -> r x 1.
    pub fn mean_cols(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        if c == 0 {
            return Err(TensorError::ShapeMismatch { op: "mean_cols", detail: "zero columns".into() });
        }
        let out = self.with_values(|v| {
            (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).collect()
        });
        self.tape.push_op(r, 1, out, Op::MeanCols(self.id), "mean_cols", self.requires_grad())
    }

    /// Column-wise max: r x c -> r x 1. Ties resolve to the first column.
    pub fn max_cols(&self) -> Result<Tensor> {
        let (r, c) = self.shape();
        if c == 0 {
            return Err(TensorError::ShapeMismatch { op: "max_cols", detail: "zero columns".into() });
        }
        let mut out = vec![0.0; r];
        let mut argmax = vec![0usize; r];
        self.with_values(|v| {
            for i in 0..r {
                let row = &v[i * c..(i + 1) * c];
                let (mut best, mut bj) = (row[0], 0);
                for (j, &x) in row.iter().enumerate().skip(1) {
                    if x > best {
                        best = x;
                        bj = j;
                    }
                }
                out[i] = best;
                argmax[i] = bj;
            }
        });
        self.tape.push_op(r, 1, out, Op::MaxCols { src: self.id, argmax }, "max_cols", self.requires_grad())
    }

    /// Extract column `col` as an r x 1 tensor.
    pub fn select_column(&self, col: usize) -> Result<Tensor> {
        let (r, c) = self.shape();
        if col >= c {
            return Err(TensorError::IndexOutOfRange {
                op: "select_column",
                detail: format!("column {} of {}x{}", col, r, c),
            });
        }
        let out = self.with_values(|v| (0..r).map(|i| v[i * c + col]).collect());
        self.tape.push_op(r, 1, out, Op::SelectColumn { src: self.id, col }, "select_column", self.requires_grad())
    }

    /// Reinterpret as `rows x cols` (row-major order preserved).
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{}x{} -> {}x{}", self.rows, self.cols, rows, cols),
            });
        }
        let out = self.with_values(|v| v.to_vec());
        self.tape.push_op(rows, cols, out, Op::Reshape(self.id), "reshape", self.requires_grad())
    }

    /// Gather rows of `self` by index: out[t, :] = self[ids[t], :].
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (r, c) = self.shape();
        if let Some(&bad) = ids.iter().find(|&&t| t >= r) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                detail: format!("row {} of {}x{}", bad, r, c),
            });
        }
        let mut out = vec![0.0; ids.len() * c];
        self.with_values(|v| {
            for (t, &row) in ids.iter().enumerate() {
                out[t * c..(t + 1) * c].copy_from_slice(&v[row * c..(row + 1) * c]);
            }
        });
        self.tape.push_op(
            ids.len(),
            c,
            out,
            Op::GatherRows { table: self.id, ids: ids.to_vec() },
            "gather_rows",
            self.requires_grad(),
        )
    }

    /// Column-wise dot product of two equally shaped matrices: 1 x c output.
    pub fn colwise_dot(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "colwise_dot",
                detail: format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            });
        }
        let (r, c) = self.shape();
        let mut out = vec![0.0; c];
        {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].values;
            let b = &inner.nodes[other.id].values;
            for i in 0..r {
                for j in 0..c {
                    out[j] += a[i * c + j] * b[i * c + j];
                }
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push_op(1, c, out, Op::ColwiseDot(self.id, other.id), "colwise_dot", rg)
    }

    /// Concatenate tensors with equal row counts along the column axis.
    pub fn hstack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Usage("hstack of zero tensors".into()))?;
        let r = first.rows;
        let mut cols = 0;
        for p in parts {
            first.same_tape(p)?;
            if p.rows != r {
                return Err(TensorError::ShapeMismatch {
                    op: "hstack",
                    detail: format!("row counts {} vs {}", r, p.rows),
                });
            }
            cols += p.cols;
        }
        let mut out = vec![0.0; r * cols];
        {
            let inner = first.tape.inner.borrow();
            let mut col0 = 0;
            for p in parts {
                let v = &inner.nodes[p.id].values;
                for i in 0..r {
                    out[i * cols + col0..i * cols + col0 + p.cols]
                        .copy_from_slice(&v[i * p.cols..(i + 1) * p.cols]);
                }
                col0 += p.cols;
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        first.tape.push_op(r, cols, out, Op::HStack(ids), "hstack", rg)
    }

    /// Reverse-mode pass from a scalar node. Populates gradients on every
    /// grad-requiring node reachable from this one and consumes the tape.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got {}x{}",
                self.rows, self.cols
            )));
        }
        let mut inner = self.tape.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::Usage("tape already consumed by backward".into()));
        }
        inner.consumed = true;
        let corrupt_tanh = inner.corrupt_tanh;
        inner.nodes[self.id].grad = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let Some(g) = inner.nodes[id].grad.clone() else { continue };
            if !inner.nodes[id].requires_grad {
                continue;
            }
            let op = inner.nodes[id].op.clone();
            let nodes = &mut inner.nodes;
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[a].rows, nodes[a].cols);
                    let n = nodes[b].cols;
                    if nodes[a].requires_grad {
                        // dA = g * B^T
                        let bt = transpose_into(&nodes[b].values, k, n);
                        let mut da = vec![0.0; m * k];
                        matmul_acc(&g, &bt, &mut da, m, n, k);
                        acc_grad(nodes, a, &da);
                    }
                    if nodes[b].requires_grad {
                        // dB = A^T * g
                        let at = transpose_into(&nodes[a].values, m, k);
                        let mut db = vec![0.0; k * n];
                        matmul_acc(&at, &g, &mut db, k, m, n);
                        acc_grad(nodes, b, &db);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[id].rows, nodes[id].cols);
                    let gt = transpose_into(&g, r, c);
                    acc_grad(nodes, a, &gt);
                }
                Op::Add(a, b) => {
                    acc_grad(nodes, a, &g);
                    acc_grad(nodes, b, &g);
                }
                Op::Mul(a, b) => {
                    if nodes[a].requires_grad {
                        let da: Vec<f64> = g.iter().zip(&nodes[b].values).map(|(&gi, &bv)| gi * bv).collect();
                        acc_grad(nodes, a, &da);
                    }
                    if nodes[b].requires_grad {
                        let db: Vec<f64> = g.iter().zip(&nodes[a].values).map(|(&gi, &av)| gi * av).collect();
                        acc_grad(nodes, b, &db);
                    }
                }
                Op::Affine { src, mul } => {
                    let da: Vec<f64> = g.iter().map(|&gi| gi * mul).collect();
                    acc_grad(nodes, src, &da);
                }
                Op::Tanh(a) => {
                    let fudge = if corrupt_tanh { 1.05 } else { 1.0 };
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[id].values)
                        .map(|(&gi, &y)| gi * (1.0 - y * y) * fudge)
                        .collect();
                    acc_grad(nodes, a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[id].values)
                        .map(|(&gi, &y)| gi * y * (1.0 - y))
                        .collect();
                    acc_grad(nodes, a, &da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = g.iter().zip(&nodes[a].values).map(|(&gi, &x)| gi / x).collect();
                    acc_grad(nodes, a, &da);
                }
                Op::Clamp { src, lo, hi } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[src].values)
                        .map(|(&gi, &x)| if (lo..=hi).contains(&x) { gi } else { 0.0 })
                        .collect();
                    acc_grad(nodes, src, &da);
                }
                Op::SoftmaxRows { src } => {
                    // dx_j = y_j * (g_j - sum_k g_k y_k); masked slots have y = 0.
                    let (r, c) = (nodes[id].rows, nodes[id].cols);
                    let y = &nodes[id].values;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            da[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                    acc_grad(nodes, src, &da);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; nodes[a].values.len()];
                    acc_grad(nodes, a, &da);
                }
                Op::MeanCols(a) => {
                    let (r, c) = (nodes[a].rows, nodes[a].cols);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let gi = g[i] / c as f64;
                        for j in 0..c {
                            da[i * c + j] = gi;
                        }
                    }
                    acc_grad(nodes, a, &da);
                }
                Op::MaxCols { src, argmax } => {
                    let c = nodes[src].cols;
                    let mut da = vec![0.0; nodes[src].values.len()];
                    for (i, &j) in argmax.iter().enumerate() {
                        da[i * c + j] = g[i];
                    }
                    acc_grad(nodes, src, &da);
                }
                Op::SelectColumn { src, col } => {
                    let (r, c) = (nodes[src].rows, nodes[src].cols);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + col] = g[i];
                    }
                    acc_grad(nodes, src, &da);
                }
                Op::HStack(parts) => {
                    let r = nodes[id].rows;
                    let total = nodes[id].cols;
                    let mut col0 = 0;
                    for p in parts {
                        let pc = nodes[p].cols;
                        if nodes[p].requires_grad {
                            let mut dp = vec![0.0; r * pc];
                            for i in 0..r {
                                dp[i * pc..(i + 1) * pc]
                                    .copy_from_slice(&g[i * total + col0..i * total + col0 + pc]);
                            }
                            acc_grad(nodes, p, &dp);
                        }
                        col0 += pc;
                    }
                }
                Op::Reshape(a) => {
                    acc_grad(nodes, a, &g);
                }
                Op::GatherRows { table, ids } => {
                    let c = nodes[table].cols;
                    let mut dt = vec![0.0; nodes[table].values.len()];
                    for (t, &row) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[row * c + j] += g[t * c + j];
                        }
                    }
                    acc_grad(nodes, table, &dt);
                }
                Op::ColwiseDot(a, b) => {
                    let (r, c) = (nodes[a].rows, nodes[a].cols);
                    if nodes[a].requires_grad {
                        let bv = &nodes[b].values;
                        let mut da = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] = g[j] * bv[i * c + j];
                            }
                        }
                        acc_grad(nodes, a, &da);
                    }
                    if nodes[b].requires_grad {
                        let av = &nodes[a].values;
                        let mut db = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                db[i * c + j] = g[j] * av[i * c + j];
                            }
                        }
                        acc_grad(nodes, b, &db);
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc_grad(nodes: &mut [Node], id: usize, delta: &[f64]) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut nodes[id].grad {
        Some(g) => {
            for (gi, &d) in g.iter_mut().zip(delta) {
                *gi += d;
            }
        }
        None => nodes[id].grad = Some(delta.to_vec()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let t = Tape::new();
        let i2 = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(2, 2, vec![3.0, -1.0, 2.5, 7.0]).unwrap();
        let p = i2.matmul(&m).unwrap();
        assert_eq!(p.values(), m.values());
    }

    #[test]
    fn matmul_hand_sum() {
        let t = Tape::new();
        let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(2, 1, vec![1.0, 1.0]).unwrap();
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.values(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = rng.gen_range(1..=16);
            let k = rng.gen_range(1..=16);
            let n = rng.gen_range(1..=16);
            let av = rand_vec(&mut rng, m * k);
            let bv = rand_vec(&mut rng, k * n);
            // Independent oracle: naive i/j/k summation order.
            let mut expect = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += av[i * k + kk] * bv[kk * n + j];
                    }
                    expect[i * n + j] = s;
                }
            }
            let t = Tape::new();
            let a = t.constant(m, k, av).unwrap();
            let b = t.constant(k, n, bv).unwrap();
            let p = a.matmul(&b).unwrap();
            for (got, want) in p.values().iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let t = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = t.constant(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let t = Tape::new();
        let a = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(a.softmax_rows(None).unwrap().values(), vec![0.5, 0.5]);

        let b = t.constant(1, 2, vec![1000.0, 0.0]).unwrap();
        let y = b.softmax_rows(None).unwrap().values();
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(y[1] < 1e-300);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_masked_matches_exp_normalize_oracle() {
        let t = Tape::new();
        let a = t.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = a.softmax_rows(Some(&[true, true, false])).unwrap().values();
        // Oracle: exp-normalize over the unmasked entries only.
        let z: f64 = (1.0f64).exp() + (2.0f64).exp();
        assert!((y[0] - 1.0f64.exp() / z).abs() < 1e-12);
        assert!((y[1] - 2.0f64.exp() / z).abs() < 1e-12);
        assert_eq!(y[2], 0.0);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let t = Tape::new();
        let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = a.softmax_rows(Some(&[true, true, false, false]));
        assert!(matches!(r, Err(TensorError::DegenerateMask { row: 1 })));
    }

    #[test]
    fn softmax_rows_sum_to_one_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = rng.gen_range(1..=4);
            let c = rng.gen_range(1..=8);
            let vals: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let t = Tape::new();
            let a = t.constant(r, c, vals).unwrap();
            let y = a.softmax_rows(None).unwrap().values();
            for i in 0..r {
                let row = &y[i * c..(i + 1) * c];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }
    }

    #[test]
    fn elementwise_fixed_points() {
        let t = Tape::new();
        let z = t.constant(1, 1, vec![0.0]).unwrap();
        assert_eq!(z.tanh().unwrap().scalar_value(), 0.0);
        assert_eq!(z.sigmoid().unwrap().scalar_value(), 0.5);
        let one = t.constant(1, 1, vec![1.0]).unwrap();
        assert_eq!(one.log().unwrap().scalar_value(), 0.0);
    }

    #[test]
    fn log_domain_error() {
        let t = Tape::new();
        let a = t.constant(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(a.log(), Err(TensorError::LogDomain)));
    }

    #[test]
    fn nonfinite_rejected_at_op_boundary() {
        let t = Tape::new();
        let a = t.constant(1, 1, vec![1e308]).unwrap();
        let doubled = a.affine(2.0, 0.0);
        assert!(matches!(doubled, Err(TensorError::NonFinite { .. })));

        t.set_finite_checks(false);
        let again = a.affine(2.0, 0.0).unwrap();
        assert!(again.scalar_value().is_infinite());
    }

    #[test]
    fn backward_square_sum() {
        let t = Tape::new();
        let x = t.leaf(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let t = Tape::new();
        let w = t.leaf(1, 1, vec![0.0]).unwrap();
        let loss = w.sigmoid().unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.25]);
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(TensorError::Usage(_))));
    }

    #[test]
    fn tape_consumed_after_backward() {
        let t = Tape::new();
        let x = t.leaf(1, 1, vec![2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(t.leaf(1, 1, vec![0.0]), Err(TensorError::Usage(_))));
        assert!(loss.backward().is_err());
    }

    #[test]
    fn gather_rows_out_of_range() {
        let t = Tape::new();
        let table = t.constant(3, 2, vec![0.0; 6]).unwrap();
        assert!(matches!(
            table.gather_rows(&[0, 3]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    /// Central finite differences over every op the model composes.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // f(x): a composition exercising matmul, transpose, tanh, sigmoid,
        // softmax, hstack, select/gather, pooling, reshape, colwise_dot.
        let build = |xv: &[f64]| -> f64 {
            let t = Tape::new();
            let x = t.leaf(3, 4, xv.to_vec()).unwrap();
            let w = t.constant(3, 3, vec![0.3, -0.1, 0.2, 0.0, 0.5, -0.4, 0.7, 0.1, -0.2]).unwrap();
            let z = w.matmul(&x).unwrap().tanh().unwrap();
            let a = z.transpose().unwrap().softmax_rows(None).unwrap(); // 4x3
            let c = x.matmul(&a).unwrap(); // 3x3
            let col = c.select_column(1).unwrap(); // 3x1
            let g = x.gather_rows(&[2, 0]).unwrap(); // 2x4
            let pooled = g.mean_cols().unwrap(); // 2x1
            let mx = c.max_cols().unwrap(); // 3x1
            let flat = Tensor::hstack(&[col.clone(), mx]).unwrap().reshape(1, 6).unwrap();
            let sig = flat.sigmoid().unwrap();
            let clip = sig.clamp(1e-7, 1.0 - 1e-7).unwrap();
            let lg = clip.log().unwrap();
            let dot = col.colwise_dot(&col).unwrap();
            let s1 = lg.sum().unwrap();
            let s2 = pooled.sum().unwrap();
            let s3 = dot.sum().unwrap();
            let s4 = c.reshape(9, 1).unwrap().affine(0.5, 0.1).unwrap().sum().unwrap();
            let loss = s1.add(&s2).unwrap().add(&s3).unwrap().add(&s4).unwrap();
            loss.scalar_value()
        };

        let xv = rand_vec(&mut rng, 12);
        // Analytic gradient.
        let t = Tape::new();
        let x = t.leaf(3, 4, xv.clone()).unwrap();
        let w = t.constant(3, 3, vec![0.3, -0.1, 0.2, 0.0, 0.5, -0.4, 0.7, 0.1, -0.2]).unwrap();
        let z = w.matmul(&x).unwrap().tanh().unwrap();
        let a = z.transpose().unwrap().softmax_rows(None).unwrap();
        let c = x.matmul(&a).unwrap();
        let col = c.select_column(1).unwrap();
        let g = x.gather_rows(&[2, 0]).unwrap();
        let pooled = g.mean_cols().unwrap();
        let mx = c.max_cols().unwrap();
        let flat = Tensor::hstack(&[col.clone(), mx]).unwrap().reshape(1, 6).unwrap();
        let lg = flat.sigmoid().unwrap().clamp(1e-7, 1.0 - 1e-7).unwrap().log().unwrap();
        let s1 = lg.sum().unwrap();
        let s2 = pooled.sum().unwrap();
        let s3 = col.colwise_dot(&col).unwrap().sum().unwrap();
        let s4 = c.reshape(9, 1).unwrap().affine(0.5, 0.1).unwrap().sum().unwrap();
        let loss = s1.add(&s2).unwrap().add(&s3).unwrap().add(&s4).unwrap();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();

        let eps = 1e-5;
        for i in 0..xv.len() {
            let mut plus = xv.clone();
            let mut minus = xv.clone();
            plus[i] += eps;
            minus[i] -= eps;
            let numeric = (build(&plus) - build(&minus)) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {}: analytic {} vs numeric {} (rel {})", i, a, numeric, rel);
        }
    }

    #[test]
    fn grads_deterministic_across_runs() {
        let run = || {
            let t = Tape::new();
            let x = t.leaf(2, 2, vec![0.3, -0.7, 1.1, 0.05]).unwrap();
            let y = x.tanh().unwrap().matmul(&x).unwrap().sum().unwrap();
            y.backward().unwrap();
            x.grad().unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "bit-identical grads expected");
    }
}
