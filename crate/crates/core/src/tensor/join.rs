use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Concatenates `[N,C_i,H,W]` tensors along the channel axis in argument order.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat of an empty list"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut channels = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat input {i} has [N,H,W]=[{tn},{th},{tw}], expected [{n},{h},{w}]"
            )));
        }
        channels.push(tc);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total * hw);
    for s in 0..n {
        for (t, &c) in inputs.iter().zip(&channels) {
            out.extend_from_slice(&t.data()[s * c * hw..(s + 1) * c * hw]);
        }
    }
    Tensor::new(vec![n, total, h, w], out)
}

/// Splits a concatenated gradient back into per-input gradients.
pub fn concat_backward<T: Real>(grad_out: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad_out.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::shape(format!(
            "concat split {channels:?} does not sum to {c} channels"
        )));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&ci| Vec::with_capacity(n * ci * hw)).collect();
    for s in 0..n {
        let mut offset = s * c * hw;
        for (part, &ci) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad_out.data()[offset..offset + ci * hw]);
            offset += ci * hw;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &ci)| Tensor::new(vec![n, ci, h, w], d))
        .collect()
}

/// `x + scale * fx`.
pub fn add_residual<T: Real>(x: &Tensor<T>, fx: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if x.shape() != fx.shape() {
        return Err(Error::shape(format!(
            "residual branch {:?} does not match shortcut {:?}",
            fx.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    out.add_scaled(fx, scale)?;
    Ok(out)
}

/// Returns `(grad_x, grad_fx)`.
pub fn add_residual_backward<T: Real>(grad_out: &Tensor<T>, scale: T) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.map(|g| g * scale))
}
