//! Dense row-major tensors and the forward kernels shared by the autodiff graph.
//!
//! Every kernel here is generic over [`Scalar`] so the same code path serves the
//! 64-bit verification mode and the 32-bit training mode.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{G2pError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    /// Name written into checkpoint manifests.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn erf(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
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

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(buf)
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn powi(self, n: i32) -> Self {
        f32::powi(self, n)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(buf)
    }
}

/// Dense n-dimensional array in row-major order.
///
/// Zero extents are allowed so that empty selections (for example a sentence
/// without polyphones) have a well-defined `0 x D` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(G2pError::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::ONE;
        }
        t
    }

    /// Builds a 2-D tensor from equally long rows of `f64` values.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(G2pError::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend(row.iter().map(|&v| S::from_f64(v)));
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(G2pError::shape("expected 2-D tensor", other, &[0, 0])),
        }
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                assert!(i < n, "index {i} out of bounds for extent {n}");
                acc * n + i
            })
    }

    pub fn row(&self, r: usize) -> &[S] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(G2pError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

/// Matrix product over the last two axes; leading batch axes must agree exactly.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ra, rb) = (a.ndim(), b.ndim());
    if ra < 2 || rb < 2 || ra != rb || a.shape[..ra - 2] != b.shape[..rb - 2] {
        return Err(G2pError::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (k2, n) = (b.shape[rb - 2], b.shape[rb - 1]);
    if k != k2 {
        return Err(G2pError::shape("matmul", &a.shape, &b.shape));
    }
    let batch: usize = a.shape[..ra - 2].iter().product();
    let mut out = vec![S::ZERO; batch * m * n];
    for bi in 0..batch {
        matmul_into(
            &a.data[bi * m * k..(bi + 1) * m * k],
            &b.data[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = a.shape[..ra - 2].to_vec();
    shape.extend([m, n]);
    Tensor::new(shape, out)
}

/// `out += a (m x k) * b (k x n)`.
pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    x * half * (S::ONE + (x * S::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of the exact GELU: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let cdf = half * (S::ONE + (x * S::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Exact (erf based) GELU, elementwise.
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.ndim() {
        return Err(G2pError::Index {
            what: "softmax axis",
            index: axis,
            size: x.ndim(),
        });
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = x.data[idx(0)];
            for j in 1..len {
                max = max.max(x.data[idx(j)]);
            }
            let mut sum = S::ZERO;
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Normalizes each position over the trailing channel axis, then applies `gain` and `bias`.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let d = *x.shape.last().ok_or_else(|| G2pError::shape("layer_norm", &x.shape, &[]))?;
    if gain.numel() != d || bias.numel() != d {
        return Err(G2pError::shape("layer_norm", &x.shape, gain.shape()));
    }
    let eps = S::from_f64(LAYER_NORM_EPS);
    let dn = S::from_usize(d);
    let mut out = x.data.clone();
    for row in out.chunks_mut(d.max(1)) {
        let mean = row.iter().copied().sum::<S>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let rstd = S::ONE / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gain.data[j] + bias.data[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Output length of a 1-D convolution, or a shape error when the stride does
/// not tile the padded input exactly.
pub fn conv1d_out_len(len: usize, kernel: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(G2pError::shape("conv1d", &[len, kernel], &[pad, stride]));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 1-D cross-correlation (no kernel flip) with zero padding.
///
/// `x` is `T x D_in`, `w` is `D_out x D_in x k`, `bias` (if any) has `D_out`
/// entries. Returns `T' x D_out`.
pub fn conv1d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    pad: usize,
    stride: usize,
) -> Result<Tensor<S>> {
    let (t, d_in) = x.dims2()?;
    let (d_out, w_in, k) = match w.shape() {
        &[o, i, k] => (o, i, k),
        other => return Err(G2pError::shape("conv1d weight", x.shape(), other)),
    };
    if w_in != d_in || k % 2 == 0 {
        return Err(G2pError::shape("conv1d", x.shape(), w.shape()));
    }
    if let Some(b) = bias {
        if b.numel() != d_out {
            return Err(G2pError::shape("conv1d bias", w.shape(), b.shape()));
        }
    }
    let t_out = conv1d_out_len(t, k, pad, stride)?;
    let mut out = vec![S::ZERO; t_out * d_out];
    for to in 0..t_out {
        for o in 0..d_out {
            let mut acc = bias.map_or(S::ZERO, |b| b.data[o]);
            for j in 0..k {
                let src = (to * stride + j) as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &x.data[src as usize * d_in..(src as usize + 1) * d_in];
                for (i, &xv) in xrow.iter().enumerate() {
                    acc += w.data[(o * d_in + i) * k + j] * xv;
                }
            }
            out[to * d_out + o] = acc;
        }
    }
    Tensor::new(vec![t_out, d_out], out)
}
