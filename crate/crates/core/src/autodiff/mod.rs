//! Define-by-run reverse-mode differentiation over [`Tensor`] kernels.
//!
//! A [`Tape`] records every operation as it executes, together with its
//! forward value. Node ids are assigned in execution order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep. Gradients reaching the same node along several paths are
//! summed, which is what makes tied weights work.

mod gradcheck;

pub use gradcheck::{finite_difference_grad, grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gelu(usize),
    Sqrt(usize),
    Abs(usize),
    ClampMin(usize, f64),
    RowSum(usize),
    SubCol(usize, usize),
    DivCol(usize, usize),
    MulRow(usize, usize),
    AddRow(usize, usize),
    SoftmaxRows(usize),
    CausalSoftmax(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Gather(usize, Vec<usize>),
    CrossEntropy(usize, Vec<usize>),
    Sum(usize),
}

struct Node<F: Scalar> {
    op: Op,
    value: Tensor<F>,
}

pub struct Tape<F: Scalar = f64> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to a leaf. Leaves the loss does not
    /// depend on get a zero tensor of their own shape.
    pub fn get(&self, v: Var) -> Tensor<F> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<F> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor<F>) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeState("cannot record on a tape after backward".into()));
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Leaf, t).expect("leaf on a consumed tape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.val(a), self.val(b))?;
        self.push(Op::MatMul(a.0, b.0), v)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.val(a), self.val(b))?;
        self.push(Op::MatMulNt(a.0, b.0), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).add(self.val(b))?;
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).sub(self.val(b))?;
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.val(a).mul(self.val(b))?;
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.val(a).scale(F::of(c))?;
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = F::of(c);
        let v = self.val(a).map("add_scalar", |x| x + c)?;
        self.push(Op::AddScalar(a.0), v)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = tensor::gelu(self.val(a))?;
        self.push(Op::Gelu(a.0), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a).map("sqrt", |x| x.sqrt())?;
        self.push(Op::Sqrt(a.0), v)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.val(a).map("abs", |x| x.abs())?;
        self.push(Op::Abs(a.0), v)
    }

    /// Elementwise `max(a, floor)`; the gradient is zero where the floor wins.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let f = F::of(floor);
        let v = self.val(a).map("clamp_min", |x| x.max(f))?;
        self.push(Op::ClampMin(a.0, floor), v)
    }

    /// Row sums as an `m×1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let data = t.data().chunks(t.cols()).map(|r| r.iter().fold(F::zero(), |acc, &x| acc + x)).collect();
        let v = Tensor::from_parts(vec![t.rows(), 1], data).ensure_finite("row_sum")?;
        self.push(Op::RowSum(a.0), v)
    }

    fn col_broadcast(&self, op: &'static str, a: Var, col: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (t, c) = (self.val(a), self.val(col));
        if c.cols() != 1 || c.rows() != t.rows() {
            return Err(Error::dim(op, t.shape(), c.shape()));
        }
        let f = &f;
        let data =
            t.data().chunks(t.cols()).zip(c.data()).flat_map(|(r, &s)| r.iter().map(move |&x| f(x, s))).collect();
        Tensor::from_parts(vec![t.rows(), t.cols()], data).ensure_finite(op)
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (t, r) = (self.val(a), self.val(row));
        if r.len() != t.cols() {
            return Err(Error::dim(op, t.shape(), r.shape()));
        }
        let data =
            t.data().chunks(t.cols()).flat_map(|chunk| chunk.iter().zip(r.data()).map(|(&x, &s)| f(x, s))).collect();
        Tensor::from_parts(vec![t.rows(), t.cols()], data).ensure_finite(op)
    }

    /// `a - col` with `col: m×1` broadcast across columns.
    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let v = self.col_broadcast("sub_col", a, col, |x, s| x - s)?;
        self.push(Op::SubCol(a.0, col.0), v)
    }

    /// `a / col` with `col: m×1` broadcast across columns.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let v = self.col_broadcast("div_col", a, col, |x, s| x / s)?;
        self.push(Op::DivCol(a.0, col.0), v)
    }

    /// `a * row` with `row` (`n` values) broadcast down the rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast("mul_row", a, row, |x, s| x * s)?;
        self.push(Op::MulRow(a.0, row.0), v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast("add_row", a, row, |x, s| x + s)?;
        self.push(Op::AddRow(a.0, row.0), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.val(a))?;
        self.push(Op::SoftmaxRows(a.0), v)
    }

    /// Row softmax of a square score matrix where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let n = t.cols();
        if t.rows() != n {
            return Err(Error::dim("causal_softmax", t.shape(), &[n, n]));
        }
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            tensor::softmax_into(&t.row(i)[..=i], &mut data);
            data.extend(std::iter::repeat_n(F::zero(), n - i - 1));
        }
        let v = Tensor::from_parts(vec![n, n], data).ensure_finite("causal_softmax")?;
        self.push(Op::CausalSoftmax(a.0), v)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.val(a).slice_rows(start, len)?;
        self.push(Op::SliceRows(a.0, start), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.val(a).slice_cols(start, len)?;
        self.push(Op::SliceCols(a.0, start), v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (first, rest) =
            parts.split_first().ok_or_else(|| Error::Contract("concat_rows needs at least one part".into()))?;
        let mut v = self.val(*first).clone();
        for p in rest {
            v = tensor::concat_rows(&v, self.val(*p))?;
        }
        self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|p| self.val(*p)).collect();
        let v = tensor::concat_cols(&tensors)?;
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), v)
    }

    /// Rows of `table` picked by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.val(table);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocabulary { id: bad, vocab: rows });
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_parts(vec![ids.len(), cols], data);
        self.push(Op::Gather(table.0, ids.to_vec()), v)
    }

    /// Mean over rows of `-log softmax(logits)[target]`, computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = cross_entropy_value(self.val(logits), targets)?;
        self.push(Op::CrossEntropy(logits.0, targets.to_vec()), Tensor::scalar(v))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.val(a).sum()).ensure_finite("sum")?;
        self.push(Op::Sum(a.0), v)
    }

    /// Reverse sweep from a scalar `loss`. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::TapeState("backward already ran on this tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not a node of this tape".into()));
        }
        if self.val(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        let loss_shape = self.val(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&loss_shape, F::one()));

        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
        }

        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn propagate(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[id];
        let value = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                accumulate(grads, a, tensor::matmul_nt(g, value(b))?)?;
                accumulate(grads, b, tensor::matmul_tn(value(a), g)?)?;
            }
            &Op::MatMulNt(a, b) => {
                accumulate(grads, a, tensor::matmul(g, value(b))?)?;
                accumulate(grads, b, tensor::matmul_tn(g, value(a))?)?;
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g.clone())?;
                accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                accumulate(grads, a, g.clone())?;
                accumulate(grads, b, g.scale(-F::one())?)?;
            }
            &Op::Mul(a, b) => {
                accumulate(grads, a, g.mul(value(b))?)?;
                accumulate(grads, b, g.mul(value(a))?)?;
            }
            &Op::Scale(a, c) => accumulate(grads, a, g.scale(F::of(c))?)?,
            &Op::AddScalar(a) => accumulate(grads, a, g.clone())?,
            &Op::Gelu(a) => {
                let d = tensor::gelu_prime(value(a))?;
                accumulate(grads, a, g.mul(&d)?)?;
            }
            &Op::Sqrt(a) => {
                let two = F::of(2.0);
                accumulate(grads, a, g.zip_map("sqrt'", &node.value, |gv, s| gv / (two * s))?)?;
            }
            &Op::Abs(a) => {
                let sign = value(a).map("abs'", |x| {
                    if x > F::zero() {
                        F::one()
                    } else if x < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    }
                })?;
                accumulate(grads, a, g.mul(&sign)?)?;
            }
            &Op::ClampMin(a, floor) => {
                let f = F::of(floor);
                let pass = g.zip_map("clamp_min'", value(a), |gv, x| if x > f { gv } else { F::zero() })?;
                accumulate(grads, a, pass)?;
            }
            &Op::RowSum(a) => {
                let src = value(a);
                let cols = src.cols();
                let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, cols)).collect();
                accumulate(grads, a, Tensor::from_parts(src.shape().to_vec(), data))?;
            }
            &Op::SubCol(a, col) => {
                accumulate(grads, a, g.clone())?;
                let sums = row_sums(g, |gv, _| -gv, g);
                accumulate(grads, col, sums)?;
            }
            &Op::DivCol(a, col) => {
                let c = value(col);
                let cols = g.cols();
                let ga: Vec<F> = g.data().iter().enumerate().map(|(i, &gv)| gv / c.data()[i / cols]).collect();
                accumulate(grads, a, Tensor::from_parts(g.shape().to_vec(), ga).ensure_finite("div_col'")?)?;
                // d(a/c)/dc = -out/c
                let mut gc = row_sums(g, |gv, out| -(gv * out), &node.value);
                for (v, &cv) in gc.data_mut().iter_mut().zip(c.data()) {
                    *v = *v / cv;
                }
                accumulate(grads, col, gc.ensure_finite("div_col'")?)?;
            }
            &Op::MulRow(a, row) => {
                let r = value(row);
                let cols = g.cols();
                let ga: Vec<F> = g.data().iter().enumerate().map(|(i, &gv)| gv * r.data()[i % cols]).collect();
                accumulate(grads, a, Tensor::from_parts(g.shape().to_vec(), ga))?;
                let gr = col_sums(g, Some(value(a)), r.shape());
                accumulate(grads, row, gr)?;
            }
            &Op::AddRow(a, row) => {
                accumulate(grads, a, g.clone())?;
                let gr = col_sums(g, None, value(row).shape());
                accumulate(grads, row, gr)?;
            }
            &Op::SoftmaxRows(a) | &Op::CausalSoftmax(a) => {
                accumulate(grads, a, softmax_backward(g, &node.value))?;
            }
            &Op::SliceRows(a, start) => {
                let src = value(a);
                let mut full = Tensor::zeros(src.shape());
                let c = src.cols();
                full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, a, full)?;
            }
            &Op::SliceCols(a, start) => {
                let src = value(a);
                let mut full = Tensor::zeros(&[src.rows(), src.cols()]);
                let (c, w) = (src.cols(), g.cols());
                for r in 0..src.rows() {
                    full.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, a, full.reshape(src.shape())?)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = value(p).rows();
                    let piece = g.slice_rows(offset, rows)?.reshape(value(p).shape())?;
                    accumulate(grads, p, piece)?;
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = value(p).cols();
                    let piece = g.slice_cols(offset, cols)?.reshape(value(p).shape())?;
                    accumulate(grads, p, piece)?;
                    offset += cols;
                }
            }
            Op::Gather(table, ids) => {
                let t = value(*table);
                let c = t.cols();
                let mut gt = Tensor::zeros(t.shape());
                let data = gt.data_mut();
                for (r, &i) in ids.iter().enumerate() {
                    for (dst, &src) in data[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *dst = *dst + src;
                    }
                }
                accumulate(grads, *table, gt)?;
            }
            Op::CrossEntropy(logits, targets) => {
                let l = value(*logits);
                let scale = g.data()[0] / F::of(targets.len() as f64);
                let mut data = Vec::with_capacity(l.len());
                for (r, &t) in targets.iter().enumerate() {
                    let start = data.len();
                    tensor::softmax_into(l.row(r), &mut data);
                    data[start + t] = data[start + t] - F::one();
                    for v in &mut data[start..] {
                        *v = *v * scale;
                    }
                }
                accumulate(grads, *logits, Tensor::from_parts(l.shape().to_vec(), data))?;
            }
            &Op::Sum(a) => {
                accumulate(grads, a, Tensor::full(value(a).shape(), g.data()[0]))?;
            }
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], id: usize, g: Tensor<F>) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Per-row sums of `f(g, other)` as an `m×1` column.
fn row_sums<F: Scalar>(g: &Tensor<F>, f: impl Fn(F, F) -> F, other: &Tensor<F>) -> Tensor<F> {
    let cols = g.cols();
    let data = g
        .data()
        .chunks(cols)
        .zip(other.data().chunks(cols))
        .map(|(gr, or)| gr.iter().zip(or).fold(F::zero(), |acc, (&a, &b)| acc + f(a, b)))
        .collect();
    Tensor::from_parts(vec![g.rows(), 1], data)
}

/// Column sums of `g` (optionally weighted elementwise by `w`), shaped like the broadcast row.
fn col_sums<F: Scalar>(g: &Tensor<F>, w: Option<&Tensor<F>>, shape: &[usize]) -> Tensor<F> {
    let cols = g.cols();
    let mut out = vec![F::zero(); cols];
    for r in 0..g.rows() {
        for (j, o) in out.iter_mut().enumerate() {
            let gv = g.data()[r * cols + j];
            *o = *o + w.map_or(gv, |w| gv * w.data()[r * cols + j]);
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn softmax_backward<F: Scalar>(g: &Tensor<F>, s: &Tensor<F>) -> Tensor<F> {
    let cols = s.cols();
    let mut data = Vec::with_capacity(s.len());
    for (gr, sr) in g.data().chunks(cols).zip(s.data().chunks(cols)) {
        let dot = gr.iter().zip(sr).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        data.extend(gr.iter().zip(sr).map(|(&gv, &sv)| sv * (gv - dot)));
    }
    Tensor::from_parts(s.shape().to_vec(), data)
}

/// Mean token negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy_value<F: Scalar>(logits: &Tensor<F>, targets: &[usize]) -> Result<F> {
    if logits.rows() != targets.len() {
        return Err(Error::dim("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if targets.is_empty() {
        return Err(Error::Contract("cross_entropy needs at least one target".into()));
    }
    let vocab = logits.cols();
    let mut total = F::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Vocabulary { id: t, vocab });
        }
        let row = logits.row(r);
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp()).ln();
        total = total + (lse - row[t]);
    }
    let mean = total / F::of(targets.len() as f64);
    if mean.is_finite() {
        Ok(mean)
    } else {
        Err(Error::NonFinite("cross_entropy"))
    }
}
