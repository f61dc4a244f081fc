use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    /// Output size `ceil(input / stride)`, padding split with the extra cell at the bottom/right.
    Same,
}

/// Geometry of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Resolved output size and leading padding for one input size.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn resolve_axis(size: usize, kernel: usize, stride: usize, padding: Padding, axis: &str) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if size < kernel {
                return Err(Error::shape(format!(
                    "{axis} {size} is smaller than kernel {kernel} under valid padding"
                )));
            }
            Ok(((size - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = size.div_ceil(stride);
            let needed = ((out - 1) * stride + kernel).saturating_sub(size);
            Ok((out, needed / 2))
        }
    }
}

impl ConvSpec {
    pub fn new(kernel_h: usize, kernel_w: usize, stride: usize, padding: Padding, in_channels: usize, out_channels: usize) -> Result<Self> {
        let spec = Self {
            kernel_h,
            kernel_w,
            stride,
            padding,
            in_channels,
            out_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn square(kernel: usize, stride: usize, padding: Padding, in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(kernel, kernel, stride, padding, in_channels, out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("stride", self.stride),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("conv {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let g = self.geometry(h, w)?;
        Ok((g.out_h, g.out_w))
    }

    pub(crate) fn geometry(&self, h: usize, w: usize) -> Result<ConvGeometry> {
        let (out_h, pad_top) = resolve_axis(h, self.kernel_h, self.stride, self.padding, "height")?;
        let (out_w, pad_left) = resolve_axis(w, self.kernel_w, self.stride, self.padding, "width")?;
        Ok(ConvGeometry {
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1
    }

    fn check(&self, input: &Tensor<impl Real>, weights: &Tensor<impl Real>, bias: Option<&Tensor<impl Real>>) -> Result<(usize, usize, usize, usize)> {
        self.validate()?;
        let (n, c, h, w) = input.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv input has {c} channels, spec expects in_channels={}",
                self.in_channels
            )));
        }
        let ws = weights.shape();
        let expected = self.weight_shape();
        if ws.len() != 4 {
            return Err(Error::shape(format!("conv weights must be 4-d, got {ws:?}")));
        }
        for (i, name) in ["out_channels", "in_channels", "kernel_h", "kernel_w"].iter().enumerate() {
            if ws[i] != expected[i] {
                return Err(Error::shape(format!(
                    "conv weight dim {i} ({name}) is {}, spec expects {}",
                    ws[i], expected[i]
                )));
            }
        }
        if let Some(b) = bias {
            if b.shape() != [self.out_channels] {
                return Err(Error::shape(format!(
                    "conv bias shape {:?} does not match out_channels={}",
                    b.shape(),
                    self.out_channels
                )));
            }
        }
        Ok((n, c, h, w))
    }
}

/// Unfolds one `C×H×W` sample into a `(C·kh·kw) × (out_h·out_w)` matrix.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, g: &ConvGeometry, cols: &mut [T]) {
    let (kh, kw, s) = (spec.kernel_h, spec.kernel_w, spec.stride);
    let p = g.out_h * g.out_w;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * s + i) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + j) as isize - g.pad_left as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto a `C×H×W` sample, accumulating overlaps.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, g: &ConvGeometry, x: &mut [T]) {
    let (kh, kw, s) = (spec.kernel_h, spec.kernel_w, spec.stride);
    let p = g.out_h * g.out_w;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * s + i) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s + j) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation of `[N,C,H,W]` input with `[F,C,kh,kw]` weights.
pub fn conv2d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let (n, c, h, w) = spec.check(input, weights, bias)?;
    let g = spec.geometry(h, w)?;
    let f = spec.out_channels;
    let p = g.out_h * g.out_w;
    let ck = c * spec.kernel_h * spec.kernel_w;
    let pointwise = spec.is_pointwise();

    let mut out = vec![T::zero(); n * f * p];
    let in_stride = c * h * w;
    out.par_chunks_mut(f * p).enumerate().for_each(|(i, y)| {
        let x = &input.data()[i * in_stride..(i + 1) * in_stride];
        if pointwise {
            gemm(false, false, f, p, ck, T::one(), weights.data(), x, T::zero(), y);
        } else {
            let mut cols = vec![T::zero(); ck * p];
            im2col(x, c, h, w, spec, &g, &mut cols);
            gemm(false, false, f, p, ck, T::one(), weights.data(), &cols, T::zero(), y);
        }
        if let Some(b) = bias {
            for (row, &bv) in y.chunks_mut(p).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::new(vec![n, f, g.out_h, g.out_w], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`conv2d`] given the upstream gradient of its output.
pub fn conv2d_backward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, grad_out: &Tensor<T>, spec: &ConvSpec) -> Result<ConvGrads<T>> {
    let (n, c, h, w) = spec.check(input, weights, None::<&Tensor<T>>)?;
    let g = spec.geometry(h, w)?;
    let f = spec.out_channels;
    let p = g.out_h * g.out_w;
    if grad_out.shape() != [n, f, g.out_h, g.out_w] {
        return Err(Error::shape(format!(
            "conv upstream gradient {:?} does not match output [{n}, {f}, {}, {}]",
            grad_out.shape(),
            g.out_h,
            g.out_w
        )));
    }
    let ck = c * spec.kernel_h * spec.kernel_w;
    let pointwise = spec.is_pointwise();
    let in_stride = c * h * w;

    // Per-sample partials, reduced below in sample order so the result does
    // not depend on how rayon schedules the work.
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &input.data()[i * in_stride..(i + 1) * in_stride];
            let gy = &grad_out.data()[i * f * p..(i + 1) * f * p];
            let mut gw = vec![T::zero(); f * ck];
            let mut gx = vec![T::zero(); in_stride];
            if pointwise {
                gemm(false, true, f, ck, p, T::one(), gy, x, T::zero(), &mut gw);
                gemm(true, false, ck, p, f, T::one(), weights.data(), gy, T::zero(), &mut gx);
            } else {
                let mut cols = vec![T::zero(); ck * p];
                im2col(x, c, h, w, spec, &g, &mut cols);
                gemm(false, true, f, ck, p, T::one(), gy, &cols, T::zero(), &mut gw);
                gemm(true, false, ck, p, f, T::one(), weights.data(), gy, T::zero(), &mut cols);
                col2im(&cols, c, h, w, spec, &g, &mut gx);
            }
            (gx, gw)
        })
        .collect();

    let mut grad_input = Vec::with_capacity(n * in_stride);
    let mut grad_w = vec![T::zero(); f * ck];
    for (gx, gw) in partials {
        grad_input.extend_from_slice(&gx);
        for (a, b) in grad_w.iter_mut().zip(gw) {
            *a += b;
        }
    }

    let mut grad_b = vec![0.0f64; f];
    for i in 0..n {
        for (fi, acc) in grad_b.iter_mut().enumerate() {
            let start = (i * f + fi) * p;
            *acc += grad_out.data()[start..start + p].iter().map(|v| v.widen()).sum::<f64>();
        }
    }

    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_input)?,
        weights: Tensor::new(spec.weight_shape().to_vec(), grad_w)?,
        bias: Tensor::new(vec![f], grad_b.into_iter().map(T::lift).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(k: usize, s: usize, pad: Padding, c: usize, f: usize) -> ConvSpec {
        ConvSpec::square(k, s, pad, c, f).unwrap()
    }

    #[test]
    fn identity_kernel_passes_value_through() {
        let x = Tensor::<f32>::new(vec![1, 1, 1, 1], vec![3.5]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), &spec(1, 1, Padding::Valid, 1, 1)).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn all_ones_valid_convolution_sums_window() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, Some(&b), &spec(2, 1, Padding::Valid, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn same_padding_preserves_size_and_matches_direct_sum() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, &spec(3, 1, Padding::Same, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        // corner (0,0) sees x[0..2, 0..2] = 0 + 1 + 4 + 5
        assert_eq!(y.data()[0], 10.0);
        // interior (1,1) sees rows 0..3, cols 0..3
        assert_eq!(y.data()[5], (1 + 2 + 4 + 5 + 6 + 8 + 9 + 10) as f64);
    }

    #[test]
    fn output_size_arithmetic() {
        let s = spec(3, 2, Padding::Same, 1, 1);
        assert_eq!(s.output_hw(7, 8).unwrap(), (4, 4));
        let v = spec(2, 2, Padding::Valid, 1, 1);
        assert_eq!(v.output_hw(7, 8).unwrap(), (3, 4));
        assert!(spec(5, 1, Padding::Valid, 1, 1).output_hw(4, 9).is_err());
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 1, 1]);
        let err = conv2d(&x, &w, None, &spec(1, 1, Padding::Valid, 3, 1)).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let w = Tensor::zeros(&[1, 2, 2, 1]);
        let err = conv2d(&x, &w, None, &spec(1, 1, Padding::Valid, 2, 1)).unwrap_err();
        assert!(err.to_string().contains("kernel_h"), "{err}");
    }
}
