use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Whether a kernel behaves as during training or at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormParams {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            momentum: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = T::lift(momentum * r.widen() + (1.0 - momentum) * b);
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&batch.var) {
            *r = T::lift(momentum * r.widen() + (1.0 - momentum) * b);
        }
    }
}

/// Per-channel statistics of one training batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    mode: Mode,
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    pub stats: Option<BatchStats>,
}

/// Splits a rank-2 `[N,C]` or rank-4 `[N,C,H,W]` shape into `(N, C, H·W)`.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::shape(format!(
            "batch norm expects [N,C] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

fn check_channels<T: Real>(name: &str, t: &Tensor<T>, c: usize) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::shape(format!(
            "batch norm {name} shape {:?} does not match {c} channels",
            t.shape()
        )));
    }
    Ok(())
}

/// Batch normalization over every axis except the channel axis.
///
/// Train mode normalizes with the batch statistics (returned in the cache so
/// the caller can fold them into `running`); infer mode uses `running`.
pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    params: &BatchNormParams,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, hw) = layout(input.shape())?;
    check_channels("gamma", gamma, c)?;
    check_channels("beta", beta, c)?;
    check_channels("running mean", &running.mean, c)?;
    check_channels("running var", &running.var, c)?;
    let x = input.data();

    let (mean, var) = match mode {
        Mode::Train => {
            let count = (n * hw) as f64;
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for i in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    let s = (i * c + ch) * hw;
                    *m += x[s..s + hw].iter().map(|v| v.widen()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for i in 0..n {
                for ch in 0..c {
                    let s = (i * c + ch) * hw;
                    let m = mean[ch];
                    var[ch] += x[s..s + hw]
                        .iter()
                        .map(|v| {
                            let d = v.widen() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            (mean, var)
        }
        Mode::Infer => (
            running.mean.data().iter().map(|v| v.widen()).collect(),
            running.var.data().iter().map(|v| v.widen()).collect(),
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + params.eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let s = (i * c + ch) * hw;
            let (m, is) = (mean[ch], inv_std[ch]);
            let (g, b) = (gamma.data()[ch].widen(), beta.data()[ch].widen());
            for j in s..s + hw {
                let h = (x[j].widen() - m) * is;
                xhat[j] = T::lift(h);
                out[j] = T::lift(h * g + b);
            }
        }
    }
    let stats = (mode == Mode::Train).then_some(BatchStats { mean, var });
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormCache {
            mode,
            xhat: Tensor::new(input.shape().to_vec(), xhat)?,
            inv_std,
            stats,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::shape(format!(
            "batch norm gradient {:?} does not match activation {:?}",
            grad_out.shape(),
            cache.xhat.shape()
        )));
    }
    let (n, c, hw) = layout(grad_out.shape())?;
    let g = grad_out.data();
    let xh = cache.xhat.data();
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let s = (i * c + ch) * hw;
            for j in s..s + hw {
                sum_g[ch] += g[j].widen();
                sum_gx[ch] += g[j].widen() * xh[j].widen();
            }
        }
    }
    let count = (n * hw) as f64;
    let mut gx = vec![T::zero(); g.len()];
    for i in 0..n {
        for ch in 0..c {
            let s = (i * c + ch) * hw;
            let scale = gamma.data()[ch].widen() * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                    for j in s..s + hw {
                        gx[j] = T::lift(scale * (g[j].widen() - mg - xh[j].widen() * mgx));
                    }
                }
                Mode::Infer => {
                    for j in s..s + hw {
                        gx[j] = T::lift(scale * g[j].widen());
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), gx)?,
        Tensor::new(vec![c], sum_gx.into_iter().map(T::lift).collect())?,
        Tensor::new(vec![c], sum_g.into_iter().map(T::lift).collect())?,
    ))
}
