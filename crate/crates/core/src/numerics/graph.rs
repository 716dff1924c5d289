//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Values are computed eagerly as ops are recorded. Each node remembers
//! whether any of its inputs requires a gradient, so frozen sub-graphs are
//! skipped entirely during the backward sweep.

use std::sync::Arc;

use super::{NumericsError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row, per-pair planar rotation angles, stored as cos/sin tables of
/// shape `rows × cols/2`. Pair `p` rotates columns `(2p, 2p + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRotation {
    rows: usize,
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl PairRotation {
    pub fn from_angles(rows: usize, pairs: usize, angles: &[f64]) -> Result<Self, NumericsError> {
        if angles.len() != rows * pairs {
            return Err(NumericsError::Invalid(format!(
                "rotation table needs {} angles, got {}",
                rows * pairs,
                angles.len()
            )));
        }
        Ok(Self {
            rows,
            pairs,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.pairs * 2
    }

    /// Rotates `x` (shape `rows × 2·pairs`); `inverse` applies the transpose.
    pub fn apply(&self, x: &Tensor, inverse: bool) -> Result<Tensor, NumericsError> {
        if x.rows() != self.rows || x.cols() != self.cols() {
            return Err(NumericsError::Shape {
                op: "rotate_pairs",
                lhs: x.dims().to_vec(),
                rhs: vec![self.rows, self.cols()],
            });
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut out = x.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            for p in 0..self.pairs {
                let c = self.cos[r * self.pairs + p];
                let s = sign * self.sin[r * self.pairs + p];
                let (a, b) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = a * c - b * s;
                row[2 * p + 1] = a * s + b * c;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    SoftmaxRows(Var),
    Gelu(Var),
    RmsNormRows { input: Var, inv_rms: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize },
    Rotate(Var, Arc<PairRotation>),
    Sum(Var),
    Mean(Var),
    Square(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss or
    /// does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub const RMS_EPS: f64 = 1e-6;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericsError> {
        let value = value.check_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => self.requires(*a) || self.requires(*b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Rotate(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a) => self.requires(*a),
            Op::RmsNormRows { input, .. }
            | Op::SliceRows { input, .. }
            | Op::SliceCols { input, .. } => self.requires(*input),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().any(|p| self.requires(*p)),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf node. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, NumericsError> {
        let v = self.push(value, Op::Leaf, "leaf")?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        self.push(v, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let v = self.value(a).scale(factor)?;
        self.push(v, Op::Scale(a, factor), "scale")
    }

    /// Adds the vector `row` (length `cols`) to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (x, r) = (self.value(a), self.value(row));
        if r.numel() != x.cols() {
            return Err(NumericsError::Shape {
                op: "add_row",
                lhs: x.dims().to_vec(),
                rhs: r.dims().to_vec(),
            });
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).softmax_rows()?;
        self.push(v, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), "gelu")
    }

    /// `x / sqrt(mean(x²) + eps)` per row, no learned gain.
    pub fn rms_norm_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = x.clone();
        let mut inv_rms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_rms.push(inv);
        }
        self.push(out, Op::RmsNormRows { input: a, inv_rms }, "rms_norm_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&values)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let v = self.value(a).slice_rows(start, end)?;
        self.push(v, Op::SliceRows { input: a, start }, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(NumericsError::Invalid("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(NumericsError::Invalid(format!(
                "column slice {start}..{end} of {}",
                x.cols()
            )));
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        let v = Tensor::new(vec![rows, end - start], data)?;
        self.push(v, Op::SliceCols { input: a, start }, "slice_cols")
    }

    pub fn rotate_pairs(&mut self, a: Var, rot: Arc<PairRotation>) -> Result<Var, NumericsError> {
        let v = rot.apply(self.value(a), false)?;
        self.push(v, Op::Rotate(a, rot), "rotate_pairs")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let n = x.numel().max(1) as f64;
        let v = Tensor::scalar(x.sum() / n);
        self.push(v, Op::Mean(a), "mean")
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), "square")
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.requires(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(lv.dims(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped"),
                Op::MatMul(a, b) => {
                    if self.requires(*a) {
                        let ga = g.matmul_nt(self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.requires(*b) {
                        let gb = self.value(*a).matmul_tn(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.requires(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.requires(*b) {
                        let gb = g.matmul_tn(self.value(*a))?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose()?)?;
                }
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0)?)?;
                    }
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g.mul(self.value(*b))?)?;
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads, *b, g.mul(self.value(*a))?)?;
                    }
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.scale(*f)?)?;
                }
                Op::AddRow(a, row) => {
                    if self.requires(*row) {
                        let mut gr = vec![0.0; g.cols()];
                        for i in 0..g.rows() {
                            for (acc, v) in gr.iter_mut().zip(g.row(i)) {
                                *acc += v;
                            }
                        }
                        let gr = Tensor::new(self.value(*row).dims().to_vec(), gr)?;
                        accumulate(&mut grads, *row, gr)?;
                    }
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut gx = g;
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = gx.row_mut(i);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut gx = g;
                    for (gv, xv) in gx.data_mut().iter_mut().zip(x.data()) {
                        *gv *= gelu_grad(*xv);
                    }
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::RmsNormRows { input, inv_rms } => {
                    let y = &node.value;
                    let cols = y.cols() as f64;
                    let mut gx = g;
                    for (i, inv) in inv_rms.iter().enumerate() {
                        let yr = y.row(i);
                        let gr = gx.row_mut(i);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum::<f64>() / cols;
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - yv * dot) * inv;
                        }
                    }
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        if self.requires(*p) {
                            accumulate(&mut grads, *p, g.slice_rows(start, start + rows)?)?;
                        }
                        start += rows;
                    }
                }
                Op::SliceRows { input, start } => {
                    let x = self.value(*input);
                    let mut gx = Tensor::zeros(x.dims());
                    let cols = x.cols();
                    gx.data_mut()[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let x = self.value(*p);
                        let cols = x.cols();
                        if self.requires(*p) {
                            let mut data = Vec::with_capacity(x.numel());
                            for i in 0..g.rows() {
                                data.extend_from_slice(&g.row(i)[start..start + cols]);
                            }
                            accumulate(&mut grads, *p, Tensor::new(x.dims().to_vec(), data)?)?;
                        }
                        start += cols;
                    }
                }
                Op::SliceCols { input, start } => {
                    let x = self.value(*input);
                    let mut gx = Tensor::zeros(x.dims());
                    let width = g.cols();
                    for i in 0..g.rows() {
                        gx.row_mut(i)[*start..start + width].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Rotate(a, rot) => {
                    accumulate(&mut grads, *a, rot.apply(&g, true)?)?;
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::filled(x.dims(), g.data()[0]))?;
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let n = x.numel().max(1) as f64;
                    accumulate(&mut grads, *a, Tensor::filled(x.dims(), g.data()[0] / n))?;
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let mut gx = g;
                    for (gv, xv) in gx.data_mut().iter_mut().zip(x.data()) {
                        *gv *= 2.0 * xv;
                    }
                    accumulate(&mut grads, *a, gx)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of scalar `loss` with respect to each of `wrt`; variables that
    /// do not influence the loss get all-zero gradients.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>, NumericsError> {
        let grads = self.backward(loss)?;
        Ok(wrt
            .iter()
            .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(*v).dims())))
            .collect())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<(), NumericsError> {
    let slot = &mut grads[v.0];
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(W x) with W: 3×2, x: 2×1 ⇒ dL/dW[i][j] = x[j].
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0]).unwrap()).unwrap();
        let x = g.constant(Tensor::new(vec![2, 1], vec![4.0, -7.0]).unwrap()).unwrap();
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y).unwrap();
        let gw = &g.grad(loss, &[w]).unwrap()[0];
        assert_eq!(gw.data(), &[4.0, -7.0, 4.0, -7.0, 4.0, -7.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let w = g.param(Tensor::filled(&[2, 2], 1.0)).unwrap();
        let c = g.constant(Tensor::filled(&[2, 2], 3.0)).unwrap();
        let loss = g.sum(c).unwrap();
        let gw = &g.grad(loss, &[w]).unwrap()[0];
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::filled(&[2, 2], 1.0)).unwrap();
        let y = g.scale(w, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_inputs_accumulate() {
        // loss = sum(x ⊙ x) ⇒ grad 2x.
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        assert_eq!(g.grad(loss, &[x]).unwrap()[0].data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn rotation_inverse_roundtrip() {
        let rot = PairRotation::from_angles(2, 2, &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let x = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 8.0]).unwrap();
        let back = rot.apply(&rot.apply(&x, false).unwrap(), true).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-14);
    }

    #[test]
    fn nan_aborts_with_op_name() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![f64::MAX])).unwrap();
        let err = g.add(x, x).unwrap_err();
        assert!(err.to_string().contains("add"));
    }
}
