use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

fn check<T: Real>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, d) = input.dims2()?;
    let [wd, m] = weights.shape()[..] else {
        return Err(Error::shape(format!("dense weights must be [D,M], got {:?}", weights.shape())));
    };
    if wd != d {
        return Err(Error::shape(format!(
            "dense input width {d} does not match weight rows {wd}"
        )));
    }
    Ok((n, d, m))
}

/// Affine map `input · weights + bias` for `[N,D]` input and `[D,M]` weights.
pub fn dense<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, m) = check(input, weights)?;
    if bias.shape() != [m] {
        return Err(Error::shape(format!(
            "dense bias shape {:?} does not match output width {m}",
            bias.shape()
        )));
    }
    let mut out = vec![T::zero(); n * m];
    for row in out.chunks_mut(m) {
        row.copy_from_slice(bias.data());
    }
    gemm(false, false, n, m, d, T::one(), input.data(), weights.data(), T::one(), &mut out);
    Tensor::new(vec![n, m], out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, d, m) = check(input, weights)?;
    if grad_out.shape() != [n, m] {
        return Err(Error::shape(format!(
            "dense upstream gradient {:?} does not match [{n}, {m}]",
            grad_out.shape()
        )));
    }
    let mut gx = vec![T::zero(); n * d];
    gemm(false, true, n, d, m, T::one(), grad_out.data(), weights.data(), T::zero(), &mut gx);
    let mut gw = vec![T::zero(); d * m];
    gemm(true, false, d, m, n, T::one(), input.data(), grad_out.data(), T::zero(), &mut gw);
    let mut gb = vec![0.0f64; m];
    for row in grad_out.data().chunks(m) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v.widen();
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n, d], gx)?,
        weights: Tensor::new(vec![d, m], gw)?,
        bias: Tensor::new(vec![m], gb.into_iter().map(T::lift).collect())?,
    })
}
