//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Values are computed eagerly when an operation is recorded; `backward`
//! walks the tape in reverse and accumulates adjoints. Nodes created with
//! [`Tape::constant`] (and everything computed only from constants) never
//! receive gradients, which keeps the weight matrices of a backend cheap.
//!
//! `column_max`, `min_of` and `elem_min` propagate the subgradient of the
//! selected element (first occurrence on ties, except `elem_min`, which
//! splits exact ties evenly).

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tensor::{CsrMatrix, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    Mean(Vec<Var>),
    Gather(Var, Arc<Vec<usize>>),
    SelectCols(Var, Vec<usize>),
    SelectRow(Var, usize),
    ConcatCols(Vec<Var>),
    SparseLeftMul(Arc<SparseOperator>, Var),
    ColumnMax { src: Var, col: usize, argmax: usize },
    MinOf { srcs: Vec<Var>, argmin: usize },
    ElemMin(Var, Var),
    Sum(Var),
    Div(Var, Var),
}

/// A fixed sparse operator with its transpose cached for the backward pass.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    forward: CsrMatrix,
    adjoint: CsrMatrix,
}

impl SparseOperator {
    pub fn new(forward: CsrMatrix) -> Self {
        let adjoint = forward.transpose();
        Self { forward, adjoint }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.forward
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    /// A differentiable input.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `scale * a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let value = self.value(a).map(|v| scale * v + offset);
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Elementwise arithmetic mean of equally shaped nodes.
    pub fn mean(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| shape_err("mean of zero nodes"))?;
        let mut acc = self.value(first).clone();
        for &v in &vars[1..] {
            let other = self.value(v);
            if other.shape() != acc.shape() {
                return Err(shape_err(format!("mean: {:?} vs {:?}", acc.shape(), other.shape())));
            }
            acc.add_assign(other);
        }
        let value = acc.scale(1.0 / vars.len() as f64);
        let rg = vars.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Mean(vars.to_vec()), rg))
    }

    /// `out[i] = src.flat[indices[i]]`, reshaped to `rows x cols`.
    pub fn gather(&mut self, src: Var, indices: Arc<Vec<usize>>, rows: usize, cols: usize) -> Result<Var> {
        if indices.len() != rows * cols {
            return Err(shape_err("gather: index count does not match output shape"));
        }
        let s = self.value(src).as_slice();
        if let Some(&bad) = indices.iter().find(|&&i| i >= s.len()) {
            return Err(shape_err(format!("gather: index {bad} out of range")));
        }
        let data = indices.iter().map(|&i| s[i]).collect();
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = self.rg(src);
        Ok(self.push(value, Op::Gather(src, indices), rg))
    }

    pub fn select_cols(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = cols.iter().find(|&&c| c >= m.cols()) {
            return Err(shape_err(format!("select_cols: column {bad} out of range")));
        }
        let value = Matrix::from_fn(m.rows(), cols.len(), |r, c| m.get(r, cols[c]));
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectCols(a, cols), rg))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let m = self.value(a);
        if row >= m.rows() {
            return Err(shape_err(format!("select_row: row {row} out of range")));
        }
        let value = Matrix::from_vec(1, m.cols(), m.row(row).to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SelectRow(a, row), rg))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| shape_err("concat of zero nodes"))?;
        let rows = self.value(first).rows();
        if vars.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(shape_err("concat_cols: row counts differ"));
        }
        let total: usize = vars.iter().map(|&v| self.value(v).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &v in vars {
            let m = self.value(v);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        let rg = vars.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::ConcatCols(vars.to_vec()), rg))
    }

    /// `op * a` for a fixed sparse operator.
    pub fn sparse_left_mul(&mut self, op: Arc<SparseOperator>, a: Var) -> Result<Var> {
        let value = op.forward.mul_dense(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SparseLeftMul(op, a), rg))
    }

    /// Maximum of one column, as a 1x1 node. Returns the node and the
    /// (first, row-major) argmax row.
    pub fn column_max(&mut self, src: Var, col: usize) -> Result<(Var, usize)> {
        let m = self.value(src);
        if col >= m.cols() || m.rows() == 0 {
            return Err(shape_err(format!("column_max: column {col} out of range")));
        }
        let mut argmax = 0;
        let mut best = m.get(0, col);
        for r in 1..m.rows() {
            let v = m.get(r, col);
            if v > best {
                best = v;
                argmax = r;
            }
        }
        let rg = self.rg(src);
        let var = self.push(Matrix::scalar(best), Op::ColumnMax { src, col, argmax }, rg);
        Ok((var, argmax))
    }

    /// Minimum over 1x1 nodes (first occurrence on ties).
    pub fn min_of(&mut self, srcs: &[Var]) -> Result<Var> {
        if srcs.is_empty() {
            return Err(shape_err("min of zero nodes"));
        }
        let mut argmin = 0;
        let mut best = self.value(srcs[0]).item();
        for (i, &v) in srcs.iter().enumerate().skip(1) {
            let x = self.value(v).item();
            if x < best {
                best = x;
                argmin = i;
            }
        }
        let rg = srcs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Matrix::scalar(best),
            Op::MinOf {
                srcs: srcs.to_vec(),
                argmin,
            },
            rg,
        ))
    }

    pub fn elem_min(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("elem_min: shapes differ"));
        }
        let value = x.zip_with(y, f64::min);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ElemMin(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Elementwise `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("div: shapes differ"));
        }
        let value = x.zip_with(y, |p, q| p / q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    /// Reverse pass from a scalar output, seeded with adjoint 1.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        let out_shape = self.nodes[output.0].value.shape();
        grads[output.0] = Some(Matrix::filled(out_shape.0, out_shape.1, 1.0));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.rg(v) {
            return;
        }
        let (r, c) = self.value(v).shape();
        let slot = grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c));
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_nt(self.value(*b)).expect("shape checked");
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).matmul_tn(g).expect("shape checked");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul(self.value(*b)).expect("shape checked");
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.matmul_tn(self.value(*a)).expect("shape checked");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Tanh(a) => {
                let ga = g.zip_with(&node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(vars) => {
                let share = g.scale(1.0 / vars.len() as f64);
                for &v in vars {
                    self.accumulate(grads, v, share.clone());
                }
            }
            Op::Gather(src, indices) => self.accumulate_with(grads, *src, |acc| {
                let buf = acc.as_mut_slice();
                for (&i, gv) in indices.iter().zip(g.as_slice()) {
                    buf[i] += gv;
                }
            }),
            Op::SelectCols(a, cols) => self.accumulate_with(grads, *a, |acc| {
                for r in 0..g.rows() {
                    for (j, &c) in cols.iter().enumerate() {
                        acc.set(r, c, acc.get(r, c) + g.get(r, j));
                    }
                }
            }),
            Op::SelectRow(a, row) => self.accumulate_with(grads, *a, |acc| {
                for (o, gv) in acc.row_mut(*row).iter_mut().zip(g.as_slice()) {
                    *o += gv;
                }
            }),
            Op::ConcatCols(vars) => {
                let mut offset = 0;
                for &v in vars {
                    let w = self.value(v).cols();
                    if self.rg(v) {
                        let part = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        self.accumulate(grads, v, part);
                    }
                    offset += w;
                }
            }
            Op::SparseLeftMul(op, a) => {
                let ga = op.adjoint.mul_dense(g).expect("shape checked");
                self.accumulate(grads, *a, ga);
            }
            Op::ColumnMax { src, col, argmax } => {
                let gv = g.item();
                self.accumulate_with(grads, *src, |acc| {
                    acc.set(*argmax, *col, acc.get(*argmax, *col) + gv);
                });
            }
            Op::MinOf { srcs, argmin } => {
                self.accumulate(grads, srcs[*argmin], g.clone());
            }
            Op::ElemMin(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    let (p, q) = (x.get(r, c), y.get(r, c));
                    g.get(r, c)
                        * if p < q {
                            1.0
                        } else if p > q {
                            0.0
                        } else {
                            0.5
                        }
                });
                let gb = g.zip_with(&ga, |gv, gav| gv - gav);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Div(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_with(y, |gv, q| gv / q));
                }
                if self.rg(*b) {
                    let gb = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                        let q = y.get(r, c);
                        -g.get(r, c) * x.get(r, c) / (q * q)
                    });
                    self.accumulate(grads, *b, gb);
                }
            }
        }
    }
}
