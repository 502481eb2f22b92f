//! Dense row-major tensors over `f32`/`f64`.
//!
//! Tensors are plain values: every operation returns a new tensor and never
//! mutates its inputs. Reductions accumulate sequentially in row-major order
//! so results are bitwise reproducible.

mod conv;
mod io;
mod linalg;

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub(crate) use conv::conv2d_with_cols;
pub use conv::{conv2d, conv2d_backward, conv2d_output_hw, im2col, Conv2dGrads};
pub use io::{read_fstn, read_fstn_as, write_fstn, AnyTensor, DType, FSTN_MAGIC, FSTN_VERSION};
pub use linalg::{matmul, matmul_nt, matmul_tn};

use crate::error::{shape_err, Result};

/// Floating point element type a tensor can hold.
pub trait Element:
    Copy
    + Default
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $n:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $n];
                buf.copy_from_slice(&bytes[..$n]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, DType::F32, 4);
impl_element!(f64, DType::F64, 8);

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", T::DTYPE, self.dims)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.contains(&0) {
        return shape_err(format!("extents must be positive, got {dims:?}"));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        assert!(
            dims.iter().all(|&d| d > 0),
            "extents must be positive, got {dims:?}"
        );
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![value; n],
        }
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::ZERO)
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::ONE)
    }

    pub fn scalar(v: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let t = Self::zeros(dims);
        let data = (0..t.data.len()).map(&mut f).collect();
        Self { dims: t.dims, data }
    }

    pub fn from_f64_slice(dims: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::ONE } else { T::ZERO })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Mutable access for in-place fills by owners during construction.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(dims, self.data.clone())
    }

    pub fn into_reshaped(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(format!("expected a matrix, got dims {:?}", self.dims)),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.dims.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    fn same_dims(&self, other: &Self, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!(
                "{op}: dims {:?} vs {:?}",
                self.dims, other.dims
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_dims(other, op)?;
        Ok(Self {
            dims: self.dims.clone(),
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

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: T, other: &Self) -> Result<Self> {
        self.zip_map(other, "axpy", |a, b| a + c * b)
    }

    /// Add `bias` (length = last extent) to every row.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        let cols = *self.dims.last().unwrap();
        if bias.len() != cols {
            return shape_err(format!(
                "bias of length {} for rows of width {cols}",
                bias.len()
            ));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::ZERO;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// `‖self − other‖ / ‖other‖`.
    pub fn rel_l2(&self, other: &Self) -> Result<f64> {
        let diff = self.sub(other)?.norm_l2();
        Ok(diff / other.norm_l2().max(f64::MIN_POSITIVE))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.shape2()?;
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Self::new([c, r], data)
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.shape2()?;
        if start >= end || end > r {
            return shape_err(format!("row range {start}..{end} of {r}"));
        }
        Self::new([end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Stack two matrices with equal width on top of each other.
    pub fn concat_rows(&self, other: &Self) -> Result<Self> {
        let (r1, c1) = self.shape2()?;
        let (r2, c2) = other.shape2()?;
        if c1 != c2 {
            return shape_err(format!("concat_rows: widths {c1} vs {c2}"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new([r1 + r2, c1], data)
    }
}

impl<T: Element> Tensor<T> {
    /// Row-wise softmax of a matrix. Rows are shifted by their max.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (_, c) = self.shape2()?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            let mx = row.iter().copied().fold(row[0], T::max);
            let mut s = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        Ok(out)
    }

    /// Row-wise layer normalisation without affine parameters.
    pub fn layer_norm_rows(&self, eps: f64) -> Result<Self> {
        let (_, c) = self.shape2()?;
        let n = T::from_f64(c as f64);
        let eps = T::from_f64(eps);
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            let mut mu = T::ZERO;
            for &v in row.iter() {
                mu += v;
            }
            mu = mu / n;
            let mut var = T::ZERO;
            for &v in row.iter() {
                var += (v - mu) * (v - mu);
            }
            let inv = T::ONE / (var / n + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * inv;
            }
        }
        Ok(out)
    }
}
