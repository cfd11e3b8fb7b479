//! Dense row-major tensors and the numeric kernels everything else is built on.
//!
//! All kernels are pure: they never mutate their inputs and they refuse to
//! hand back NaN or infinite values. Matrix products accumulate each output
//! element strictly left to right over the shared index, so results are
//! bit-stable run to run on a single thread.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating point element type of a [`Tensor`]. Implemented for `f32` and `f64`.
pub trait Scalar: Float + FromPrimitive + Default + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static {
    /// Element width in bytes as stored in checkpoints.
    const BYTES: usize;
    /// Guard used by row L2 normalisation.
    const NORM_EPS: f64;

    fn erf(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NORM_EPS: f64 = 1e-12;

    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NORM_EPS: f64 = 1e-6;

    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, checking that the data fills the shape and is finite.
    /// Extents may be zero only along the leading axis (an empty set of rows).
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Contract(format!("tensor rank must be 1..=3, got {}", shape.len())));
        }
        if shape[1..].contains(&0) {
            return Err(Error::Contract(format!("zero extent in trailing axis of {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Tensor { shape, data }.ensure_finite("Tensor::new")
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Builds a matrix from nested `f64` rows (converted to `F`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        let data = rows.iter().flatten().map(|&v| F::of(v)).collect();
        Self::new(vec![rows.len(), cols.max(1)], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable view for optimisers and initialisers. Callers keep values finite.
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of the matrix view (leading axes flattened).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Column count of the matrix view (last axis).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::of(v.f64())).collect() }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self.data.iter().zip(&other.data).fold(F::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn map(&self, op: &'static str, f: impl Fn(F) -> F) -> Result<Self> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }.ensure_finite(op)
    }

    pub fn zip_map(&self, op: &'static str, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.same_shape(op, other)?;
        Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
            .ensure_finite(op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map("mul", other, |a, b| a * b)
    }

    pub fn scale(&self, c: F) -> Result<Self> {
        self.map("scale", |v| v * c)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data }
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows() {
            return Err(Error::dim("slice_rows", &self.shape, &[start, len]));
        }
        let c = self.cols();
        Ok(Tensor { shape: vec![len, c], data: self.data[start * c..(start + len) * c].to_vec() })
    }

    /// Columns `start..start + len` as a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.cols();
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", &self.shape, &[start, len]));
        }
        let r = self.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Tensor { shape: vec![r, len], data })
    }
}

fn check_inner<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>, ka: usize, kb: usize) -> Result<()> {
    if ka != kb {
        return Err(Error::dim(op, &a.shape, &b.shape));
    }
    Ok(())
}

/// `a · b` for `a: m×k`, `b: k×p`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k, p) = (a.rows(), a.cols(), b.cols());
    check_inner("matmul", a, b, k, b.rows())?;
    let mut out = vec![F::zero(); m * p];
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, p], out).ensure_finite("matmul")
}

/// `a · bᵀ` for `a: m×k`, `b: p×k`.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k, p) = (a.rows(), a.cols(), b.rows());
    check_inner("matmul_nt", a, b, k, b.cols())?;
    let mut out = Vec::with_capacity(m * p);
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..p {
            let b_row = &b.data[j * k..(j + 1) * k];
            let dot = a_row.iter().zip(b_row).fold(F::zero(), |acc, (&x, &y)| acc + x * y);
            out.push(dot);
        }
    }
    Tensor::from_parts(vec![m, p], out).ensure_finite("matmul_nt")
}

/// `aᵀ · b` for `a: k×m`, `b: k×p`.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (k, m, p) = (a.rows(), a.cols(), b.cols());
    check_inner("matmul_tn", a, b, k, b.rows())?;
    let mut out = vec![F::zero(); m * p];
    for kk in 0..k {
        let a_row = &a.data[kk * m..(kk + 1) * m];
        let b_row = &b.data[kk * p..(kk + 1) * p];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, p], out).ensure_finite("matmul_tn")
}

#[inline]
pub(crate) fn gelu_scalar<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    x * half * (F::one() + (x * F::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_prime_scalar<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    let cdf = half * (F::one() + (x * F::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * F::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Exact GeLU, `x·Φ(x)` with Φ evaluated through `erf`.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.map("gelu", gelu_scalar)
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
pub fn gelu_prime<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.map("gelu_prime", gelu_prime_scalar)
}

/// Divides each row by `max(‖row‖₂, eps)`; zero rows stay zero.
pub fn row_l2_normalize<F: Scalar>(a: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    if !(eps > F::zero()) {
        return Err(Error::Contract("row_l2_normalize needs eps > 0".into()));
    }
    let c = a.cols();
    let mut data = Vec::with_capacity(a.len());
    for row in a.data.chunks(c) {
        let norm = row.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt().max(eps);
        data.extend(row.iter().map(|&v| v / norm));
    }
    Tensor::from_parts(a.shape.clone(), data).ensure_finite("row_l2_normalize")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let c = a.cols();
    let mut data = Vec::with_capacity(a.len());
    for row in a.data.chunks(c) {
        softmax_into(row, &mut data);
    }
    Tensor::from_parts(a.shape.clone(), data).ensure_finite("softmax_rows")
}

pub(crate) fn softmax_into<F: Scalar>(row: &[F], out: &mut Vec<F>) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let start = out.len();
    let mut total = F::zero();
    for &v in row {
        let e = (v - max).exp();
        total = total + e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e = *e / total;
    }
}

/// `a`'s rows followed by `b`'s rows.
pub fn concat_rows<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.cols() != b.cols() {
        return Err(Error::dim("concat_rows", &a.shape, &b.shape));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor::from_parts(vec![a.rows() + b.rows(), a.cols()], data))
}

/// Columns of each part laid side by side; all parts share a row count.
pub fn concat_cols<F: Scalar>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = parts.first().ok_or_else(|| Error::Contract("concat_cols needs at least one part".into()))?;
    let rows = first.rows();
    if let Some(bad) = parts.iter().find(|p| p.rows() != rows) {
        return Err(Error::dim("concat_cols", &first.shape, &bad.shape));
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Ok(Tensor::from_parts(vec![rows, cols], data))
}
