//! Dense row-major tensors and the raw numeric kernels shared by the
//! autograd tape and the eager helpers.
//!
//! Every reduction runs left to right in row-major order so that forward
//! values are bit-reproducible for identical inputs.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{MugError, Result};

/// Floating-point scalar used for storage and arithmetic.
///
/// `f32` is the training precision; `f64` is used for gradient verification.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("finite conversion")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + Default
        + Sum
        + AddAssign
        + SubAssign
        + MulAssign
        + Send
        + Sync
        + 'static
{
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(MugError::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MugError::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::lit(v)))
            .collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
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

    /// Interprets the tensor as a matrix; 1-D tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(MugError::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).expect("cast"))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

fn require_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(MugError::Dimension {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `c[i,j] = Σ_p a[i,p]·b[p,j]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(MugError::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    kernels::matmul_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = x.dims2();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        kernels::softmax_row(&x.data[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n], None);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub fn layer_norm_rows<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (m, n) = x.dims2();
    if gamma.numel() != n || beta.numel() != n {
        return Err(MugError::Dimension {
            op: "layer_norm_rows",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        kernels::layer_norm_row(
            &x.data[i * n..(i + 1) * n],
            &gamma.data,
            &beta.data,
            eps,
            &mut out[i * n..(i + 1) * n],
        );
    }
    Tensor::new(x.shape.clone(), out)
}

/// Tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Real>(x: T) -> T {
    kernels::gelu(x)
}

pub(crate) mod kernels {
    use super::Real;

    pub const GELU_COEFF: f64 = 0.044715;
    pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

    /// `out += a·b` with `a: [m,k]`, `b: [k,n]`.
    pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }

    /// Dot product with eight interleaved partial sums combined in a fixed
    /// order, so results do not depend on vector width.
    #[inline]
    pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
        let mut acc = [T::zero(); 8];
        let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
        let (xr, yr) = (xc.remainder(), yc.remainder());
        for (a, b) in xc.zip(yc) {
            for l in 0..8 {
                acc[l] += a[l] * b[l];
            }
        }
        let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
        for (&a, &b) in xr.iter().zip(yr) {
            s += a * b;
        }
        s
    }

    /// `out += a·bᵀ` with `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// `out += aᵀ·b` with `a: [m,k]`, `b: [m,n]`, result `[k,n]`.
    pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }

    /// Softmax over the entries of `x` allowed by `allowed` (all when `None`).
    /// Disallowed entries get probability exactly zero.
    pub fn softmax_row<T: Real>(x: &[T], out: &mut [T], allowed: Option<&[bool]>) {
        let ok = |j: usize| allowed.is_none_or(|a| a[j]);
        let mut max = T::neg_infinity();
        for (j, &v) in x.iter().enumerate() {
            if ok(j) && v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (j, o) in out.iter_mut().enumerate() {
            if ok(j) {
                *o = (x[j] - max).exp();
                sum += *o;
            } else {
                *o = T::zero();
            }
        }
        let inv = T::one() / sum;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }

    pub fn row_mean_rstd<T: Real>(x: &[T], eps: T) -> (T, T) {
        let n = T::from_usize(x.len()).unwrap();
        let mut mean = T::zero();
        for &v in x {
            mean += v;
        }
        mean = mean / n;
        let mut var = T::zero();
        for &v in x {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        (mean, T::one() / (var + eps).sqrt())
    }

    pub fn layer_norm_row<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: T, out: &mut [T]) {
        let (mean, rstd) = row_mean_rstd(x, eps);
        for j in 0..x.len() {
            out[j] = (x[j] - mean) * rstd * gamma[j] + beta[j];
        }
    }

    pub fn gelu<T: Real>(x: T) -> T {
        let c = T::lit(SQRT_2_OVER_PI);
        let u = c * (x + T::lit(GELU_COEFF) * x * x * x);
        T::lit(0.5) * x * (T::one() + u.tanh())
    }

    pub fn gelu_grad<T: Real>(x: T) -> T {
        let c = T::lit(SQRT_2_OVER_PI);
        let a = T::lit(GELU_COEFF);
        let t = (c * (x + a * x * x * x)).tanh();
        let half = T::lit(0.5);
        half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
    }

    /// Numerically stable `log Σ exp(x)`.
    pub fn log_sum_exp<T: Real>(x: &[T]) -> T {
        let mut max = T::neg_infinity();
        for &v in x {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in x {
            sum += (v - max).exp();
        }
        max + sum.ln()
    }
}
