//! Inception-style building blocks.
//!
//! A block is described declaratively as a list of branches, each a chain of
//! [`Step`]s over the block input; branch outputs are concatenated along the
//! channel axis. The named constructors below produce the compact module
//! family used by the backbone: plain multi-scale modules, modules with
//! asymmetric `n×1`/`1×n` factorization, modules with an expanded filter bank
//! (a parent activation feeding `1×3` and `3×1` convolutions side by side),
//! and grid reductions that halve the spatial size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Concat, ConvUnit, Dense, Flatten, Initializer, Layer, Param, Pool, Residual, SampleShape, Seq, TrainCtx};
use crate::tensor::{ConvSpec, Padding, PoolKind, PoolSpec, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Convolution followed by batch norm and ReLU.
    Conv {
        kernel: (usize, usize),
        channels: usize,
        stride: usize,
        padding: Padding,
    },
    Pool(PoolSpec),
    /// Parallel sub-branches over the current activation, concatenated.
    Split(Vec<Vec<Step>>),
}

impl Step {
    pub fn conv(kh: usize, kw: usize, channels: usize) -> Self {
        Step::Conv {
            kernel: (kh, kw),
            channels,
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn conv_strided(kh: usize, kw: usize, channels: usize, stride: usize, padding: Padding) -> Self {
        Step::Conv {
            kernel: (kh, kw),
            channels,
            stride,
            padding,
        }
    }
}

pub type BranchSpec = Vec<Step>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub branches: Vec<BranchSpec>,
    pub use_residual: bool,
    pub residual_scale: f64,
    pub width_multiplier: f64,
}

pub const DEFAULT_RESIDUAL_SCALE: f64 = 0.2;

/// Scales a base channel count, never below one.
pub fn scaled(base: usize, multiplier: f64) -> usize {
    ((base as f64 * multiplier).round() as usize).max(1)
}

fn same_avg_pool() -> Step {
    Step::Pool(PoolSpec::new(PoolKind::Avg, 3, 1, Padding::Same))
}

impl BlockConfig {
    fn with_branches(branches: Vec<BranchSpec>, width_multiplier: f64) -> Self {
        Self {
            branches,
            use_residual: false,
            residual_scale: DEFAULT_RESIDUAL_SCALE,
            width_multiplier,
        }
    }

    pub fn residual(mut self, scale: f64) -> Self {
        self.use_residual = true;
        self.residual_scale = scale;
        self
    }

    /// `1×1 | 1×1→3×3 | 1×1→3×3→3×3 | pool→1×1`.
    pub fn module_a(m: f64) -> Self {
        let c = |b| scaled(b, m);
        Self::with_branches(
            vec![
                vec![Step::conv(1, 1, c(16))],
                vec![Step::conv(1, 1, c(12)), Step::conv(3, 3, c(16))],
                vec![Step::conv(1, 1, c(12)), Step::conv(3, 3, c(16)), Step::conv(3, 3, c(16))],
                vec![same_avg_pool(), Step::conv(1, 1, c(8))],
            ],
            m,
        )
    }

    /// Module whose large kernels are factorized into `n×1` followed by `1×n`.
    pub fn factorized(n: usize, m: f64) -> Self {
        let c = |b| scaled(b, m);
        let fact = |ch| [Step::conv(n, 1, ch), Step::conv(1, n, ch)];
        let mut b2 = vec![Step::conv(1, 1, c(16))];
        b2.extend(fact(c(24)));
        let mut b3 = vec![Step::conv(1, 1, c(16))];
        b3.extend(fact(c(16)));
        b3.extend(fact(c(24)));
        Self::with_branches(
            vec![
                vec![Step::conv(1, 1, c(24))],
                b2,
                b3,
                vec![same_avg_pool(), Step::conv(1, 1, c(16))],
            ],
            m,
        )
    }

    /// Module widened by feeding a parent activation to parallel `1×3` and `3×1` convolutions.
    pub fn expanded_filter_bank(m: f64) -> Self {
        let c = |b| scaled(b, m);
        let split = |ch| Step::Split(vec![vec![Step::conv(1, 3, ch)], vec![Step::conv(3, 1, ch)]]);
        Self::with_branches(
            vec![
                vec![Step::conv(1, 1, c(32))],
                vec![Step::conv(1, 1, c(24)), split(c(24))],
                vec![Step::conv(1, 1, c(24)), Step::conv(3, 3, c(24)), split(c(24))],
                vec![same_avg_pool(), Step::conv(1, 1, c(16))],
            ],
            m,
        )
    }

    /// Parallel stride-2 convolution and pooling branches; output size is `floor(H/2) × floor(W/2)`.
    pub fn grid_reduction(m: f64) -> Self {
        let c = |b| scaled(b, m);
        Self::with_branches(
            vec![
                vec![Step::conv_strided(2, 2, c(32), 2, Padding::Valid)],
                vec![
                    Step::conv(1, 1, c(16)),
                    Step::conv(3, 3, c(24)),
                    Step::conv_strided(2, 2, c(24), 2, Padding::Valid),
                ],
                vec![Step::Pool(PoolSpec::new(PoolKind::Max, 2, 2, Padding::Valid))],
            ],
            m,
        )
    }
}

fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::shape(format!("blocks expect [C,H,W] inputs, got {shape:?}"))),
    }
}

fn build_chain<T: Real>(name: &str, steps: &[Step], input: &[usize], init: &mut Initializer) -> Result<(Box<dyn Layer<T>>, SampleShape)> {
    let mut layers: Vec<Box<dyn Layer<T>>> = Vec::with_capacity(steps.len());
    let mut shape = input.to_vec();
    for (i, step) in steps.iter().enumerate() {
        let layer: Box<dyn Layer<T>> = match step {
            Step::Conv {
                kernel,
                channels,
                stride,
                padding,
            } => {
                let (c, _, _) = chw(&shape)?;
                let spec = ConvSpec::new(kernel.0, kernel.1, *stride, *padding, c, *channels)?;
                Box::new(ConvUnit::conv_bn_relu(&format!("{name}.conv{i}"), spec, init)?)
            }
            Step::Pool(spec) => Box::new(Pool::new(*spec)),
            Step::Split(subs) => {
                let mut branches = Vec::with_capacity(subs.len());
                for (j, sub) in subs.iter().enumerate() {
                    branches.push(build_chain(&format!("{name}.split{i}.{j}"), sub, &shape, init)?.0);
                }
                Box::new(Concat::new(branches, &shape)?)
            }
        };
        shape = layer.output_shape(&shape)?;
        layers.push(layer);
    }
    if layers.len() == 1 {
        return Ok((layers.pop().expect("one layer"), shape));
    }
    Ok((Box::new(Seq::new(layers)), shape))
}

/// Builds a multi-branch block for `input = [C, H, W]`, wrapping it in a
/// residual connection when the config asks for one.
pub fn build_block<T: Real>(name: &str, cfg: &BlockConfig, input: &[usize], init: &mut Initializer) -> Result<Box<dyn Layer<T>>> {
    if cfg.width_multiplier <= 0.0 {
        return Err(Error::invalid("width_multiplier must be positive"));
    }
    if cfg.branches.is_empty() {
        return Err(Error::invalid(format!("{name}: block without branches")));
    }
    chw(input)?;
    let mut branches = Vec::with_capacity(cfg.branches.len());
    for (i, steps) in cfg.branches.iter().enumerate() {
        if steps.is_empty() {
            return Err(Error::invalid(format!("{name}: branch {i} is empty")));
        }
        branches.push(build_chain(&format!("{name}.branch{i}"), steps, input, init)?.0);
    }
    let block: Box<dyn Layer<T>> = Box::new(Concat::new(branches, input)?);
    if cfg.use_residual {
        return Ok(Box::new(residual_wrap(name, block, input, cfg.residual_scale, init)?));
    }
    Ok(block)
}

/// `n×1` then `1×n` convolution with same padding: an `n×n` receptive field
/// at `2n/n²` of the parameters.
pub fn factorized_conv_nxn<T: Real>(name: &str, in_channels: usize, n: usize, channels: usize, init: &mut Initializer) -> Result<Seq<T>> {
    if n < 3 || n.is_multiple_of(2) {
        return Err(Error::invalid(format!("factorized kernel size must be odd and >= 3, got {n}")));
    }
    let first = ConvSpec::new(n, 1, 1, Padding::Same, in_channels, channels)?;
    let second = ConvSpec::new(1, n, 1, Padding::Same, channels, channels)?;
    Ok(Seq::new(vec![
        Box::new(ConvUnit::conv_bn_relu(&format!("{name}.nx1"), first, init)?),
        Box::new(ConvUnit::conv_bn_relu(&format!("{name}.1xn"), second, init)?),
    ]))
}

/// Wraps `body` as `shortcut(x) + scale * body(x)`. A 1×1 conv + BN projection
/// becomes the shortcut when the body changes the channel count.
pub fn residual_wrap<T: Real>(name: &str, body: Box<dyn Layer<T>>, input: &[usize], scale: f64, init: &mut Initializer) -> Result<Residual<T>> {
    let (c, h, w) = chw(input)?;
    let out = body.output_shape(input)?;
    let (oc, oh, ow) = chw(&out)?;
    if (oh, ow) != (h, w) {
        return Err(Error::shape(format!(
            "{name}: residual body changes spatial size {h}x{w} -> {oh}x{ow}"
        )));
    }
    let projection: Option<Box<dyn Layer<T>>> = if oc != c {
        let spec = ConvSpec::square(1, 1, Padding::Same, c, oc)?;
        Some(Box::new(ConvUnit::conv_bn(&format!("{name}.shortcut"), spec, init)?))
    } else {
        None
    };
    Residual::new(body, projection, scale, input)
}

/// Mid-network classifier head: avg-pool → 1×1 conv → dense logits.
pub struct AuxClassifier<T> {
    body: Seq<T>,
}

impl<T: Real> AuxClassifier<T> {
    pub fn new(name: &str, input: &[usize], channels: usize, num_classes: usize, init: &mut Initializer) -> Result<Self> {
        let (c, h, w) = chw(input)?;
        let mut layers: Vec<Box<dyn Layer<T>>> = Vec::new();
        if h >= 2 && w >= 2 {
            layers.push(Box::new(Pool::new(PoolSpec::new(PoolKind::Avg, 2, 2, Padding::Valid))));
        }
        let spec = ConvSpec::square(1, 1, Padding::Same, c, channels)?;
        layers.push(Box::new(ConvUnit::conv_bn_relu(&format!("{name}.conv"), spec, init)?));
        layers.push(Box::new(Flatten::default()));
        let mut body = Seq::new(layers);
        let flat = body.output_shape(input)?[0];
        body.push(Box::new(Dense::new(&format!("{name}.fc"), flat, num_classes, 1.0, init)));
        Ok(Self { body })
    }
}

impl<T: Real> Layer<T> for AuxClassifier<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        self.body.forward(x, ctx)
    }
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.body.backward(grad)
    }
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.body.infer(x)
    }
    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        self.body.output_shape(input)
    }
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        self.body.params(out)
    }
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.body.params_mut(out)
    }
}
