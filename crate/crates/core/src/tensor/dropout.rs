use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Per-element multipliers applied by an inverted-dropout forward pass
/// (`0` for dropped units, `1 / (1 - rate)` for kept ones).
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    scale: Vec<f64>,
}

impl DropoutMask {
    pub fn kept(&self) -> usize {
        self.scale.iter().filter(|&&s| s != 0.0).count()
    }
}

/// Inverted dropout. Infer mode (and `rate == 0`) is the identity.
pub fn dropout<T: Real>(input: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<(Tensor<T>, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 - rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: Vec<f64> = (0..input.len())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let data = input
        .data()
        .iter()
        .zip(&scale)
        .map(|(&v, &s)| T::lift(v.widen() * s))
        .collect();
    Ok((Tensor::new(input.shape().to_vec(), data)?, Some(DropoutMask { scale })))
}

pub fn dropout_backward<T: Real>(grad_out: &Tensor<T>, mask: Option<&DropoutMask>) -> Result<Tensor<T>> {
    let Some(mask) = mask else {
        return Ok(grad_out.clone());
    };
    if mask.scale.len() != grad_out.len() {
        return Err(Error::shape("dropout mask does not match gradient"));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&mask.scale)
        .map(|(&g, &s)| T::lift(g.widen() * s))
        .collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}
