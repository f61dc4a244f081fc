use super::{softmax, Real, Tensor};
use crate::error::{Error, Result};

/// Mean loss over the batch and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grad: Tensor<T>,
    pub probs: Tensor<T>,
}

/// `(1 - eps) * onehot(label) + eps / K`.
pub fn smoothed_targets(label: usize, classes: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / classes as f64; classes];
    t[label] += 1.0 - eps;
    t
}

/// Cross-entropy against label-smoothed targets, averaged over the batch.
pub fn smoothed_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize], eps: f64) -> Result<LossOutput<T>> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("label smoothing {eps} outside [0, 1)")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (i, &label) in labels.iter().enumerate() {
        let target = smoothed_targets(label, k, eps);
        let z = &logits.data()[i * k..(i + 1) * k];
        let max = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.widen()));
        let log_sum = z.iter().map(|v| (v.widen() - max).exp()).sum::<f64>().ln() + max;
        let p = &probs.data()[i * k..(i + 1) * k];
        for j in 0..k {
            loss -= target[j] * (z[j].widen() - log_sum);
            grad.push(T::lift((p[j].widen() - target[j]) / n as f64));
        }
    }
    Ok(LossOutput {
        loss: loss / n as f64,
        grad: Tensor::new(vec![n, k], grad)?,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let z = Tensor::<f64>::new(vec![1, 2], vec![50.0, -50.0]).unwrap();
        let out = smoothed_cross_entropy(&z, &[0], 0.0).unwrap();
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn smoothing_targets_two_classes() {
        let t = smoothed_targets(0, 2, 0.1);
        assert!((t[0] - 0.95).abs() < 1e-15 && (t[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_softmax_minus_target() {
        let z = Tensor::<f64>::new(vec![2, 2], vec![0.3, -0.2, 1.0, 2.0]).unwrap();
        let out = smoothed_cross_entropy(&z, &[1, 0], 0.1).unwrap();
        for i in 0..2 {
            let t = smoothed_targets([1, 0][i], 2, 0.1);
            for (j, tj) in t.iter().enumerate() {
                let want = (out.probs.data()[i * 2 + j] - tj) / 2.0;
                assert!((out.grad.data()[i * 2 + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn label_out_of_range() {
        let z = Tensor::<f32>::zeros(&[1, 2]);
        assert!(smoothed_cross_entropy(&z, &[2], 0.1).is_err());
    }
}
