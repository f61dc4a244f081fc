use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first
/// step and keyed by position in the parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub params: AdamParams,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Self {
            params,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter. Fails without
    /// touching anything if a gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param<f32>], lr: f64) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("optimizer state does not match parameter list"));
        }
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            if m.len() != p.value.len() {
                return Err(Error::shape(format!("optimizer moments do not match `{}`", p.name)));
            }
            let Param { value, grad, .. } = &mut **p;
            for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w = (*w as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}
