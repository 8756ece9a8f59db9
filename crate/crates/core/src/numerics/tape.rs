//! A small reverse-mode differentiation tape over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse creation order and accumulates vector-Jacobian
//! products. Nodes whose gradient was never touched are skipped, so a pass
//! seeded on a small part of the graph only costs that part. The tape is
//! immutable after construction: it can be swept backward any number of
//! times with different seeds, which is what the Neumann adjoint solve needs.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clip01(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    GatherRows { x: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, label: usize },
    Mse(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Clip to `[0, 1]`.
pub fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Subgradient of [`clip01`]: 1 on the closed interval `[0, 1]`, 0 outside.
pub fn clip01_grad(x: f64) -> f64 {
    if (0.0..=1.0).contains(&x) {
        1.0
    } else {
        0.0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Per-row standardization; returns the normalized rows and `1/std` per row.
pub(crate) fn layer_norm_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv.push(is);
    }
    (out, inv)
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_transpose_b(self.value(b))?;
        Ok(self.push(v, Op::MatMulTransB(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(format!(
                "row {:?} does not broadcast over {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// Multiplies every row of `x` element-wise by a `1 x cols` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(format!(
                "row {:?} does not broadcast over {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, g) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= g;
            }
        }
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a + s);
        self.push(v, Op::AddScalar(x))
    }

    pub fn clip01(&mut self, x: Var) -> Var {
        let v = self.value(x).map(clip01);
        self.push(v, Op::Clip01(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Standardizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let (v, inv_std) = layer_norm_rows(self.value(x), eps);
        self.push(v, Op::LayerNormRows { x, inv_std })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::shape("column slice out of range"));
        }
        let mut out = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::shape("nothing to concatenate"))?;
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("row counts differ in concat"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Column-wise mean over rows, producing `1 x cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = col_sums(xv).scale(1.0 / xv.rows().max(1) as f64);
        self.push(v, Op::MeanRows(x))
    }

    /// Selects rows of `x` by index (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape(format!(
                "row index {bad} out of range for {} rows",
                xv.rows()
            )));
        }
        let mut out = Matrix::zeros(indices.len(), xv.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Softmax cross-entropy of a `1 x classes` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 || label >= lv.cols() {
            return Err(Error::shape(format!(
                "label {label} invalid for logits {:?}",
                lv.shape()
            )));
        }
        let max = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[label];
        Ok(self.push(Matrix::row_vector(&[loss]), Op::CrossEntropy { logits, label }))
    }

    /// Mean squared error over all entries, producing `1 x 1`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.check_same_shape(bv)?;
        let n = av.len().max(1) as f64;
        let loss = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / n;
        Ok(self.push(Matrix::row_vector(&[loss]), Op::Mse(a, b)))
    }

    /// `sum_k w_k * x_k` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms.first().ok_or_else(|| Error::shape("empty weighted sum"))?;
        let mut acc = Matrix::zeros(self.value(first.0).rows(), self.value(first.0).cols());
        for (v, w) in terms {
            acc.add_scaled(self.value(*v), *w)?;
        }
        Ok(self.push(acc, Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse sweep from the given seeds (`d output`), returning gradients
    /// for every node that the seeds reach.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Result<Grads> {
        self.sweep(seeds, None)
    }

    /// Like [`Tape::backward`], but only nodes that lie on a path to one of
    /// `wrt` receive gradients. Work feeding other leaves is skipped.
    pub fn backward_wrt(&self, seeds: &[(Var, Matrix)], wrt: &[Var]) -> Result<Grads> {
        let mut live = vec![false; self.nodes.len()];
        for v in wrt {
            live[v.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !live[i] && inputs(&node.op).iter().any(|v| live[v.0]) {
                live[i] = true;
            }
        }
        self.sweep(seeds, Some(&live))
    }

    fn sweep(&self, seeds: &[(Var, Matrix)], live: Option<&[bool]>) -> Result<Grads> {
        let want = |v: &Var| live.is_none_or(|l| l[v.0]);
        let acc = |grads: &mut [Option<Matrix>], v: Var, g: Matrix| -> Result<()> {
            if want(&v) {
                accumulate(grads, v, g)
            } else {
                Ok(())
            }
        };
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            self.value(*v).check_same_shape(g)?;
            accumulate(&mut grads, *v, g.clone())?;
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if want(a) {
                        acc(&mut grads, *a, dy.matmul_transpose_b(self.value(*b))?)?;
                    }
                    if want(b) {
                        acc(&mut grads, *b, self.value(*a).transpose_a_matmul(&dy)?)?;
                    }
                }
                Op::MatMulTransB(a, b) => {
                    if want(a) {
                        acc(&mut grads, *a, dy.matmul(self.value(*b))?)?;
                    }
                    if want(b) {
                        acc(&mut grads, *b, dy.transpose_a_matmul(self.value(*a))?)?;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone())?;
                    acc(&mut grads, *b, dy.clone())?;
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, dy.scale(-1.0))?;
                    acc(&mut grads, *a, dy.clone())?;
                }
                Op::AddRow(x, row) => {
                    acc(&mut grads, *row, col_sums(&dy))?;
                    acc(&mut grads, *x, dy.clone())?;
                }
                Op::MulRow(x, row) => {
                    let rv = self.value(*row);
                    let xv = self.value(*x);
                    let mut dx = dy.clone();
                    for r in 0..dx.rows() {
                        for (d, g) in dx.row_mut(r).iter_mut().zip(rv.data()) {
                            *d *= g;
                        }
                    }
                    let drow = col_sums(&dy.zip_map(xv, |a, b| a * b)?);
                    acc(&mut grads, *x, dx)?;
                    acc(&mut grads, *row, drow)?;
                }
                Op::Scale(x, s) => acc(&mut grads, *x, dy.scale(*s))?,
                Op::AddScalar(x) => acc(&mut grads, *x, dy.clone())?,
                Op::Clip01(x) => {
                    let dx = self.value(*x).zip_map(&dy, |a, g| clip01_grad(a) * g)?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = dy.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - inner);
                        }
                    }
                    acc(&mut grads, *x, dx)?;
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = dy.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = inv_std[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, dx)?;
                }
                Op::Gelu(x) => {
                    let dx = self.value(*x).zip_map(&dy, |a, g| gelu_grad(a) * g)?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..dy.rows() {
                        dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *x, dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[at..at + pv.cols()]);
                        }
                        at += pv.cols();
                        acc(&mut grads, *p, dp)?;
                    }
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let scale = 1.0 / xv.rows().max(1) as f64;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        for (d, g) in dx.row_mut(r).iter_mut().zip(dy.data()) {
                            *d = g * scale;
                        }
                    }
                    acc(&mut grads, *x, dx)?;
                }
                Op::GatherRows { x, indices } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, g) in dx.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    acc(&mut grads, *x, dx)?;
                }
                Op::CrossEntropy { logits, label } => {
                    let mut p = self.value(*logits).clone();
                    softmax_in_place(p.data_mut());
                    p.data_mut()[*label] -= 1.0;
                    acc(&mut grads, *logits, p.scale(dy.get(0, 0)))?;
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let k = 2.0 * dy.get(0, 0) / av.len().max(1) as f64;
                    let da = av.zip_map(bv, |x, y| k * (x - y))?;
                    acc(&mut grads, *b, da.scale(-1.0))?;
                    acc(&mut grads, *a, da)?;
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        acc(&mut grads, *v, dy.scale(*w))?;
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b)
        | Op::MatMulTransB(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::Mse(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Clip01(x)
        | Op::SoftmaxRows(x)
        | Op::LayerNormRows { x, .. }
        | Op::Gelu(x)
        | Op::SliceCols { x, .. }
        | Op::MeanRows(x)
        | Op::GatherRows { x, .. } => vec![*x],
        Op::ConcatCols(parts) => parts.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
