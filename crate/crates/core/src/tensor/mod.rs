//! Dense rank-4 tensors, row-major matrices, the operator kernels the network
//! needs, and a reverse-mode tape for training.
//!
//! Layout is always `(n, c, h, w)` row-major. Matrices that flow through the
//! tape are carried as `(1, 1, rows, cols)` tensors.

pub(crate) mod kernels;
pub mod ops;
mod tape;
mod gradcheck;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

use crate::error::{McmsError, Result};

pub use gradcheck::{grad_check, grad_check_with_floor, CoordSelection, GradCheckReport, DEFAULT_FLOOR};
pub use ops::{activation, avgpool2d, concat_channels, conv2d, matmul, softmax_rows, upsample2x};
pub use tape::{GradTape, Gradients, Var};

/// Scalar type for tensors. Implemented for `f32` (training) and `f64`
/// (oracles and gradient checks).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + rustfft::FftNum
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c = op(a) * op(b) (+ c)` on raw row-major buffers. `op(a)` is `m x k`,
    /// `op(b)` is `k x n`. When `trans_a` is set, `a` is stored `k x m`.
    ///
    /// # Safety
    /// Buffers must hold at least the elements implied by the dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense `(n, c, h, w)` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview = &self.data[..self.data.len().min(8)];
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(op: &'static str, shape: [usize; 4]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(McmsError::shape(op, format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

impl<T: Real> Tensor4<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        check_shape("tensor", shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(McmsError::shape(
                "tensor",
                format!("{} elements for shape {shape:?} ({expected})", data.len()),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Tensor4 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let [n, c, h, w] = shape;
        let mut i = 0;
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f(ni, ci, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    /// Single-element tensor.
    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// The `h x w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(McmsError::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&self, shape: [usize; 4]) -> Result<Self> {
        check_shape("reshape", shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(McmsError::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        Ok(Tensor4 {
            shape,
            data: self.data.clone(),
        })
    }

    /// Channels `start..start + len` of every sample.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if len == 0 || start + len > c {
            return Err(McmsError::shape(
                "slice_channels",
                format!("channels {start}..{} of {c}", start + len),
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for ni in 0..n {
            let base = (ni * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Ok(Tensor4 {
            shape: [n, len, h, w],
            data,
        })
    }

    /// Equal split along channels into `groups` tensors.
    pub fn chunk(&self, groups: usize) -> Result<Vec<Self>> {
        let c = self.c();
        if groups == 0 || c % groups != 0 {
            return Err(McmsError::shape(
                "chunk",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        let per = c / groups;
        (0..groups)
            .map(|g| self.slice_channels(g * per, per))
            .collect()
    }

    /// Sample `index` as a batch-of-one tensor.
    pub fn select_batch(&self, index: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if index >= n {
            return Err(McmsError::shape("select_batch", format!("index {index} of {n}")));
        }
        let len = c * h * w;
        Ok(Tensor4 {
            shape: [1, c, h, w],
            data: self.data[index * len..(index + 1) * len].to_vec(),
        })
    }

    /// Concatenate along the batch axis.
    pub fn stack_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| McmsError::shape("stack_batch", "no inputs"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(McmsError::shape(
                    "stack_batch",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4 {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Swap the last two axes of every `(n, c)` plane.
    pub fn transpose_planes(&self) -> Self {
        let [n, c, h, w] = self.shape;
        let mut out = Tensor4::zeros([n, c, w, h]);
        for p in 0..n * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[x * h + y] = src[y * w + x];
                }
            }
        }
        out
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(McmsError::shape(
                "matrix",
                format!("{} elements for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(size: usize) -> Self {
        let mut m = Self::zeros(size, size);
        for i in 0..size {
            m.data[i * size + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(McmsError::shape("matrix", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let t = self.as_tensor().transpose_planes();
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: t.into_data(),
        }
    }

    /// View as a `(1, 1, rows, cols)` tensor.
    pub fn as_tensor(&self) -> Tensor4<T> {
        Tensor4 {
            shape: [1, 1, self.rows, self.cols],
            data: self.data.clone(),
        }
    }

    /// Inverse of [`Matrix::as_tensor`]: requires `n == c == 1`.
    pub fn from_tensor(t: &Tensor4<T>) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 1 {
            return Err(McmsError::shape("matrix", format!("tensor {:?} is not a matrix", t.shape())));
        }
        Self::new(h, w, t.data().to_vec())
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows).map(|r| self.row(r).iter().copied().sum()).collect()
    }
}
