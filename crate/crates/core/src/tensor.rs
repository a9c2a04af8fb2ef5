//! Dense row-major tensors and the matmul kernel they share.

use std::fmt::{Debug, Display};

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for size {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

/// Floating-point element type. Training runs at `f32`; gradient checks at `f64`.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// True when no element is NaN or infinite.
    fn all_finite(xs: &[Self]) -> bool;

    /// `c = a·b + beta·c` with explicit strides. Callers go through [`gemm`].
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

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
    fn all_finite(xs: &[Self]) -> bool {
        // Exponent all ones marks inf/NaN; a max over magnitudes vectorizes.
        xs.iter().fold(0u32, |m, v| m.max(v.to_bits() & 0x7fff_ffff)) < 0x7f80_0000
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
    fn all_finite(xs: &[Self]) -> bool {
        xs.iter().fold(0u64, |m, v| m.max(v.to_bits() & 0x7fff_ffff_ffff_ffff)) < 0x7ff0_0000_0000_0000
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Storage orientation of a gemm operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as written, row-major.
    Plain,
    /// Stored row-major as the transpose of the logical operand.
    Transposed,
}

/// `c (m×n) = op(a) (m×k) · op(b) (k×n)`, overwriting `c` or adding into it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Plain => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Plain => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths are asserted above, so every strided access stays in bounds.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A dense tensor with at most three axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(TensorError::shape(
                "tensor",
                format!("rank must be 1..=3, got {}", shape.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::shape("tensor", format!("zero-sized axis in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![T::zero(); numel]).expect("valid zero shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel]).expect("valid shape")
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        T::all_finite(&self.data)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Tensor::new(self.shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Plain (non-recording) matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = rhs.as_matrix("matmul")?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &self.data, Layout::Plain, &rhs.data, Layout::Plain, &mut out, false);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor<T>, TensorError> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(TensorError::shape(op, format!("expected a matrix, got {other:?}"))),
        }
    }
}

/// Iteration geometry for operations that reduce along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lanes {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl Lanes {
    pub fn new(shape: &[usize], axis: usize, op: &'static str) -> Result<Self, TensorError> {
        if axis >= shape.len() {
            return Err(TensorError::shape(
                op,
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        Ok(Lanes {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    pub fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// Flat indices of lane `l` in order along the axis.
    pub fn indices(&self, l: usize) -> impl Iterator<Item = usize> + Clone {
        let (o, j) = (l / self.inner, l % self.inner);
        let base = o * self.len * self.inner + j;
        let stride = self.inner;
        (0..self.len).map(move |i| base + i * stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_f64(&[2, 2], &[2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);
        let row = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let col = Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn transposed_layouts_agree_with_explicit_transpose() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 4], &[1., 0., 2., 1., 3., 1., 0., 2.]).unwrap();
        // aᵀ·b through strides
        let mut c = vec![0.0; 12];
        gemm(3, 2, 4, a.data(), Layout::Transposed, b.data(), Layout::Plain, &mut c, false);
        let expect = a.transpose().unwrap().matmul(&b).unwrap();
        assert_eq!(c, expect.data());
        // a·aᵀ
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, a.data(), Layout::Plain, a.data(), Layout::Transposed, &mut c, false);
        assert_eq!(c, vec![14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn lanes_walk_middle_axis() {
        let lanes = Lanes::new(&[2, 3, 4], 1, "t").unwrap();
        assert_eq!(lanes.count(), 8);
        let first: Vec<_> = lanes.indices(0).collect();
        assert_eq!(first, vec![0, 4, 8]);
        let last: Vec<_> = lanes.indices(7).collect();
        assert_eq!(last, vec![15, 19, 23]);
    }
}
