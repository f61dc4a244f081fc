//! Stateful layers over the pure tensor kernels.
//!
//! A layer's training forward pass caches what its backward pass needs and
//! accumulates parameter gradients into [`Param::grad`]. [`Layer::infer`]
//! takes `&self` and never touches caches or running statistics, so a trained
//! network can serve predictions from several threads.

mod combinators;
mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub use combinators::{Concat, Residual, Seq};
pub use layers::{ConvUnit, Dense, Dropout, Flatten, GlobalAvgPool, Pool, Relu};

/// A named tensor owned by a layer. Buffers (running statistics) are
/// persisted with the model but never optimized.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub(crate) fn accumulate(&mut self, grad: &Tensor<T>) -> Result<()> {
        self.grad.add_scaled(grad, T::one())
    }
}

/// Per-step context for training forward passes.
pub struct TrainCtx {
    rng: ChaCha8Rng,
}

impl TrainCtx {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Feature-map shape of one sample: `[C, H, W]` or `[D]`.
pub type SampleShape = Vec<usize>;

pub trait Layer<T: Real>: Send + Sync {
    /// Training-mode forward pass; caches activations for [`Layer::backward`].
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut TrainCtx) -> Result<Tensor<T>>;

    /// Consumes the cached activations, accumulates parameter gradients and
    /// returns the gradient with respect to the layer input.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape>;

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>);

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>);
}

/// Fan-in scaled normal initializer, `std = gain / sqrt(fan_in)`.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn fan_in<T: Real>(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::lift(normal.sample(&mut self.rng)))
    }
}

pub(crate) fn missing_cache(layer: &str) -> crate::Error {
    crate::Error::invalid(format!("{layer}: backward called without a cached forward pass"))
}

/// Sum of squared gradients over a parameter list.
pub fn grad_norm<T: Real>(params: &[&Param<T>]) -> f64 {
    params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| {
            let n = p.grad.norm();
            n * n
        })
        .sum::<f64>()
        .sqrt()
}
