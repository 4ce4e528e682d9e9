//! Dense row-major arrays and the few numeric kernels the rest of the crate
//! composes: matrix products, softmax, softplus and cross-entropy.
//!
//! Everything is generic over [`Scalar`] so that the same code path runs in
//! 32-bit (training, benchmarks) and 64-bit (gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Width in bits; doubles as the precision tag in checkpoint headers.
    const BITS: u8;

    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 literal representable")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `BITS / 8` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    const BITS: u8 = 32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    const BITS: u8 = 64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Row-major dense array. The last axis varies fastest.
#[derive(Clone, PartialEq)]
pub struct DenseTensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for DenseTensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseTensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> DenseTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("DenseTensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Builds a 2-D tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("DenseTensor::from_rows", &[cols], &[bad.len()]));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// I.i.d. N(0, std^2) entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: T, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::sample_normal(rng) * std)
    }

    /// I.i.d. uniform entries on `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: T, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let u = T::lit(rng.random::<f64>());
            (u * T::lit(2.0) - T::one()) * bound
        })
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let flat = index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i);
        self.data[flat]
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::shape("transpose", &self.shape, &[2]));
        }
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// `||self - other||_F / max(||other||_F, tiny)`.
    pub fn rel_err(&self, other: &Self) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = (a - b).to_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt();
        diff / other.frobenius().max(1e-300)
    }

    pub fn cast<U: Scalar>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.to_f64())).collect(),
        }
    }
}

fn check_2d<T: Scalar>(op: &'static str, t: &DenseTensor<T>) -> Result<()> {
    if t.ndim() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok(())
}

/// `[B×m] · [m×n] → [B×n]`.
pub fn matmul<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    check_2d("matmul", a)?;
    check_2d("matmul", b)?;
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (rows, inner, cols) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); rows * cols];
    for (a_row, out_row) in a.data.chunks_exact(inner.max(1)).zip(out.chunks_exact_mut(cols.max(1))) {
        for (k, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b.data[k * cols..(k + 1) * cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    DenseTensor::new(vec![rows, cols], out)
}

/// `[B×n] · [m×n]ᵀ → [B×m]`.
pub fn matmul_transpose_b<T: Scalar>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
) -> Result<DenseTensor<T>> {
    check_2d("matmul_transpose_b", a)?;
    check_2d("matmul_transpose_b", b)?;
    if a.cols() != b.cols() {
        return Err(Error::shape("matmul_transpose_b", a.shape(), b.shape()));
    }
    let (rows, inner, cols) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let a_row = &a.data[i * inner..(i + 1) * inner];
        for j in 0..cols {
            let b_row = &b.data[j * inner..(j + 1) * inner];
            out[i * cols + j] = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
        }
    }
    DenseTensor::new(vec![rows, cols], out)
}

/// `[B×m]ᵀ · [B×n] → [m×n]`.
pub fn matmul_transpose_a<T: Scalar>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
) -> Result<DenseTensor<T>> {
    check_2d("matmul_transpose_a", a)?;
    check_2d("matmul_transpose_a", b)?;
    if a.rows() != b.rows() {
        return Err(Error::shape("matmul_transpose_a", a.shape(), b.shape()));
    }
    let (m, n) = (a.cols(), b.cols());
    let mut out = vec![T::zero(); m * n];
    for r in 0..a.rows() {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for (i, &av) in a_row.iter().enumerate() {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    DenseTensor::new(vec![m, n], out)
}

/// Numerically stable softmax. `-inf` entries map to exactly zero.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() || max.is_nan() {
        return Err(Error::InvalidInput(
            "softmax needs at least one finite entry".into(),
        ));
    }
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `ln(1 + e^x)`, returning `x` itself once `x > 30`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_tensor<T: Scalar>(t: &DenseTensor<T>) -> DenseTensor<T> {
    DenseTensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&x| softplus(x)).collect(),
    }
}

/// Derivative of softplus.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean cross-entropy over a batch, and its gradient `(softmax - onehot) / B`
/// with respect to the logits.
pub fn cross_entropy<T: Scalar>(
    logits: &DenseTensor<T>,
    labels: &[usize],
) -> Result<(T, DenseTensor<T>)> {
    check_2d("cross_entropy", logits)?;
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[labels.len()],
        ));
    }
    let classes = logits.cols();
    let batch = labels.len();
    let mut grad = DenseTensor::zeros(logits.shape());
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Index {
                what: "cross_entropy label",
                index: label,
                bound: classes,
            });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let inv_b = T::one() / T::lit(batch as f64);
        for (g, &x) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (x - log_z).exp() * inv_b;
        }
        grad.row_mut(i)[label] -= inv_b;
    }
    let loss = if batch == 0 {
        T::zero()
    } else {
        total / T::lit(batch as f64)
    };
    Ok((loss, grad))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
