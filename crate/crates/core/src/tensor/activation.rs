use super::{Real, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks the upstream gradient wherever the forward output was not positive.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu gradient {:?} does not match activation {:?}",
            grad_out.shape(),
            output.shape()
        )));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// Row-wise softmax over `[N,K]` with max subtraction.
pub fn softmax<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = input.dims2()?;
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.widen()));
        let exps: Vec<f64> = row.iter().map(|v| (v.widen() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::lift(e / total)));
    }
    Tensor::new(input.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_and_stable() {
        let z = Tensor::<f32>::new(vec![2, 2], vec![0.0, 0.0, 1000.0, 1000.0]).unwrap();
        let p = softmax(&z).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::new(vec![2], vec![-1.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 2.0]);
        let g = relu_backward(&y, &Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }
}
