//! Dense row-major tensors and the differentiable kernels built on them.
//!
//! Every kernel is a pure function: forward passes take immutable inputs and
//! return their outputs together with whatever the paired backward pass needs.
//! Kernels are generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod activation;
mod conv;
mod dense;
mod dropout;
mod gemm;
mod join;
mod loss;
mod norm;
mod pool;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use activation::{relu, relu_backward, softmax};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec, Padding};
pub use dense::{dense, dense_backward, DenseGrads};
pub use dropout::{dropout, dropout_backward, DropoutMask};
pub use gemm::gemm;
pub use join::{add_residual, add_residual_backward, concat_backward, concat_channels};
pub use loss::{smoothed_cross_entropy, smoothed_targets, LossOutput};
pub use norm::{
    batch_norm, batch_norm_backward, BatchNormCache, BatchNormParams, BatchStats, Mode,
    RunningStats,
};
pub use pool::{global_avg_pool, global_avg_pool_backward, pool2d, pool2d_backward, PoolKind, PoolSpec};

/// Floating-point element type for tensors.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lift(v: f64) -> Self;
    fn widen(self) -> f64;

    /// Raw GEMM entry point; see [`gemm`] for the checked wrapper.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    #[inline]
    fn lift(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    #[inline]
    fn lift(v: f64) -> Self {
        v
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense N-dimensional array stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a 4-d [N,C,H,W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as `[N, D]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, d] => Ok((n, d)),
            _ => Err(Error::shape(format!(
                "expected a 2-d [N,D] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other * alpha`.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * alpha;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.widen()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.widen();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lift(v.widen())).collect(),
        }
    }

    /// Copies sample `i` of the leading axis into a new tensor with leading dim 1.
    pub fn sample(&self, i: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| Error::shape("scalar has no samples"))?;
        if i >= n {
            return Err(Error::shape(format!("sample {i} out of range for batch {n}")));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new (or the existing unit) leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let inner: Vec<usize> = if first.shape.first() == Some(&1) && first.rank() > 1 {
            first.shape[1..].to_vec()
        } else {
            first.shape.clone()
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.len() != first.len() {
                return Err(Error::shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }
}
