use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Everything in this crate is at most 2-D; a
/// vector of length `n` has shape `[n]` and is treated as a `1 x n` row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {len} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count when viewed as a matrix.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows() == other.rows() && self.cols() == other.cols()
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, v| if v.abs() > m { v.abs() } else { m })
    }

    /// Precision conversion, e.g. `f64` master weights to `f32`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// `out = x * w^T (+ out if accumulate)`, with `x: [b, in]`, `w: [out, in]`.
pub(crate) fn matmul_xwt<T: Scalar>(
    x: &[T],
    b: usize,
    inp: usize,
    w: &[T],
    out_dim: usize,
    out: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        b,
        inp,
        out_dim,
        T::one(),
        x,
        inp as isize,
        1,
        w,
        1,
        inp as isize,
        beta,
        out,
        out_dim as isize,
        1,
    );
}

/// `out (+)= dy * w`, with `dy: [b, out]`, `w: [out, in]`, `out: [b, in]`.
pub(crate) fn matmul_dyw<T: Scalar>(
    dy: &[T],
    b: usize,
    out_dim: usize,
    w: &[T],
    inp: usize,
    out: &mut [T],
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        b,
        out_dim,
        inp,
        T::one(),
        dy,
        out_dim as isize,
        1,
        w,
        inp as isize,
        1,
        beta,
        out,
        inp as isize,
        1,
    );
}

/// `gw += dy^T * x`, with `dy: [b, out]`, `x: [b, in]`, `gw: [out, in]`.
pub(crate) fn matmul_dytx<T: Scalar>(
    dy: &[T],
    b: usize,
    out_dim: usize,
    x: &[T],
    inp: usize,
    gw: &mut [T],
) {
    T::gemm(
        out_dim,
        b,
        inp,
        T::one(),
        dy,
        1,
        out_dim as isize,
        x,
        inp as isize,
        1,
        T::one(),
        gw,
        inp as isize,
        1,
    );
}

/// `gb += column sums of dy`.
pub(crate) fn add_col_sums<T: Scalar>(dy: &[T], cols: usize, gb: &mut [T]) {
    for row in dy.chunks_exact(cols) {
        for (g, &d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
}
