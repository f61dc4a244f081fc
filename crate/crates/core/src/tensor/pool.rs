use serde::{Deserialize, Serialize};

use super::{Padding, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl PoolSpec {
    pub fn new(kind: PoolKind, window: usize, stride: usize, padding: Padding) -> Self {
        Self {
            kind,
            window,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (g, _) = self.geometry(h, w)?;
        Ok(g)
    }

    fn geometry(&self, h: usize, w: usize) -> Result<((usize, usize), (usize, usize))> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::invalid("pool window and stride must be positive"));
        }
        if self.window > h || self.window > w {
            return Err(Error::shape(format!(
                "pool window {} larger than input {h}x{w}",
                self.window
            )));
        }
        Ok(match self.padding {
            Padding::Valid => (
                ((h - self.window) / self.stride + 1, (w - self.window) / self.stride + 1),
                (0, 0),
            ),
            Padding::Same => {
                let oh = h.div_ceil(self.stride);
                let ow = w.div_ceil(self.stride);
                let ph = ((oh - 1) * self.stride + self.window).saturating_sub(h) / 2;
                let pw = ((ow - 1) * self.stride + self.window).saturating_sub(w) / 2;
                ((oh, ow), (ph, pw))
            }
        })
    }
}

/// Iterates the in-bounds input cells of one pooling window.
fn window_cells(oy: usize, ox: usize, spec: &PoolSpec, pad: (usize, usize), h: usize, w: usize) -> impl Iterator<Item = usize> {
    let y0 = (oy * spec.stride) as isize - pad.0 as isize;
    let x0 = (ox * spec.stride) as isize - pad.1 as isize;
    let win = spec.window as isize;
    (y0.max(0)..(y0 + win).min(h as isize)).flat_map(move |y| {
        (x0.max(0)..(x0 + win).min(w as isize)).map(move |x| y as usize * w + x as usize)
    })
}

/// Max or average pooling over `[N,C,H,W]`.
///
/// Returns the pooled tensor and, for max pooling, the flat input index each
/// output was taken from. Average pooling divides by the number of in-bounds
/// cells, so padding never dilutes the mean.
pub fn pool2d<T: Real>(input: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let ((oh, ow), pad) = spec.geometry(h, w)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::new();
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let plane = &input.data()[base..base + h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                match spec.kind {
                    PoolKind::Max => {
                        let mut best = usize::MAX;
                        let mut best_v = T::neg_infinity();
                        for idx in window_cells(oy, ox, spec, pad, h, w) {
                            if best == usize::MAX || plane[idx] > best_v {
                                best = idx;
                                best_v = plane[idx];
                            }
                        }
                        out.push(best_v);
                        argmax.push(base + best);
                    }
                    PoolKind::Avg => {
                        let mut sum = 0.0f64;
                        let mut count = 0usize;
                        for idx in window_cells(oy, ox, spec, pad, h, w) {
                            sum += plane[idx].widen();
                            count += 1;
                        }
                        out.push(T::lift(sum / count as f64));
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Backward pass of [`pool2d`]: routes to the argmax, or spreads uniformly.
pub fn pool2d_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>, spec: &PoolSpec, argmax: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape(format!("pool input shape must be 4-d, got {input_shape:?}")));
    };
    let ((oh, ow), pad) = spec.geometry(h, w)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::shape(format!(
            "pool upstream gradient {:?} does not match output [{n}, {c}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let mut grad = vec![T::zero(); n * c * h * w];
    match spec.kind {
        PoolKind::Max => {
            if argmax.len() != grad_out.len() {
                return Err(Error::shape("max-pool argmax does not match gradient"));
            }
            for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                grad[idx] += g;
            }
        }
        PoolKind::Avg => {
            for plane_idx in 0..n * c {
                let base = plane_idx * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grad_out.data()[(plane_idx * oh + oy) * ow + ox];
                        let cells: Vec<usize> = window_cells(oy, ox, spec, pad, h, w).collect();
                        let share = g / T::lift(cells.len() as f64);
                        for idx in cells {
                            grad[base + idx] += share;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), grad)
}

/// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let out = input
        .data()
        .chunks(hw)
        .map(|plane| T::lift(plane.iter().map(|v| v.widen()).sum::<f64>() / hw as f64))
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape(format!("pool input shape must be 4-d, got {input_shape:?}")));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::shape(format!(
            "global pool gradient {:?} does not match [{n}, {c}]",
            grad_out.shape()
        )));
    }
    let scale = T::lift(1.0 / (h * w) as f64);
    let mut grad = Vec::with_capacity(n * c * h * w);
    for &g in grad_out.data() {
        grad.extend(std::iter::repeat_n(g * scale, h * w));
    }
    Tensor::new(input_shape.to_vec(), grad)
}
