use super::{missing_cache, Initializer, Layer, Param, SampleShape, TrainCtx};
use crate::error::{Error, Result};
use crate::tensor::{
    self, batch_norm, batch_norm_backward, conv2d, conv2d_backward, dense, dense_backward,
    BatchNormCache, BatchNormParams, ConvSpec, DropoutMask, Mode, PoolSpec, Real, RunningStats,
    Tensor,
};

fn sample_chw(input: &[usize], layer: &str) -> Result<(usize, usize, usize)> {
    match input {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::shape(format!("{layer} expects [C,H,W] feature maps, got {input:?}"))),
    }
}

struct BatchNormState<T> {
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Param<T>,
    running_var: Param<T>,
    params: BatchNormParams,
}

impl<T: Real> BatchNormState<T> {
    fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one())),
            params: BatchNormParams::default(),
        }
    }

    fn running(&self) -> RunningStats<T> {
        RunningStats {
            mean: self.running_mean.value.clone(),
            var: self.running_var.value.clone(),
        }
    }

    fn run(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        batch_norm(x, &self.gamma.value, &self.beta.value, &self.running(), &self.params, mode)
    }

    fn commit(&mut self, cache: &BatchNormCache<T>) {
        if let Some(stats) = &cache.stats {
            let mut running = self.running();
            running.update(stats, self.params.momentum);
            self.running_mean.value = running.mean;
            self.running_var.value = running.var;
        }
    }
}

struct ConvCache<T> {
    input: Tensor<T>,
    bn: Option<BatchNormCache<T>>,
    output: Tensor<T>,
}

/// Convolution optionally followed by batch norm and ReLU.
pub struct ConvUnit<T> {
    name: String,
    spec: ConvSpec,
    weight: Param<T>,
    bias: Option<Param<T>>,
    bn: Option<BatchNormState<T>>,
    relu: bool,
    cache: Option<ConvCache<T>>,
}

impl<T: Real> ConvUnit<T> {
    pub fn new(name: &str, spec: ConvSpec, batch_norm: bool, relu: bool, bias: bool, init: &mut Initializer) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
        let gain = if relu { 2f64.sqrt() } else { 1.0 };
        Ok(Self {
            name: name.to_string(),
            spec,
            weight: Param::new(format!("{name}.weight"), init.fan_in(&spec.weight_shape(), fan_in, gain)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]))),
            bn: batch_norm.then(|| BatchNormState::new(&format!("{name}.bn"), spec.out_channels)),
            relu,
            cache: None,
        })
    }

    /// Conv → BN → ReLU, the default unit inside every block.
    pub fn conv_bn_relu(name: &str, spec: ConvSpec, init: &mut Initializer) -> Result<Self> {
        Self::new(name, spec, true, true, false, init)
    }

    /// Conv → BN without activation (shortcut projections).
    pub fn conv_bn(name: &str, spec: ConvSpec, init: &mut Initializer) -> Result<Self> {
        Self::new(name, spec, true, false, false, init)
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Param<T> {
        &self.weight
    }

    fn bias_value(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref().map(|b| &b.value)
    }
}

impl<T: Real> Layer<T> for ConvUnit<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        let z = conv2d(x, &self.weight.value, self.bias_value(), &self.spec)?;
        let (y, bn_cache) = match &mut self.bn {
            Some(bn) => {
                let (y, cache) = bn.run(&z, Mode::Train)?;
                bn.commit(&cache);
                (y, Some(cache))
            }
            None => (z, None),
        };
        let out = if self.relu { tensor::relu(&y) } else { y };
        self.cache = Some(ConvCache {
            input: x.clone(),
            bn: bn_cache,
            output: out.clone(),
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache(&self.name))?;
        let mut g = if self.relu {
            tensor::relu_backward(&cache.output, grad)?
        } else {
            grad.clone()
        };
        if let (Some(bn), Some(bn_cache)) = (&mut self.bn, &cache.bn) {
            let (gx, gg, gb) = batch_norm_backward(&g, &bn.gamma.value, bn_cache)?;
            bn.gamma.accumulate(&gg)?;
            bn.beta.accumulate(&gb)?;
            g = gx;
        }
        let grads = conv2d_backward(&cache.input, &self.weight.value, &g, &self.spec)?;
        self.weight.accumulate(&grads.weights)?;
        if let Some(b) = &mut self.bias {
            b.accumulate(&grads.bias)?;
        }
        Ok(grads.input)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = conv2d(x, &self.weight.value, self.bias_value(), &self.spec)?;
        let y = match &self.bn {
            Some(bn) => bn.run(&z, Mode::Infer)?.0,
            None => z,
        };
        Ok(if self.relu { tensor::relu(&y) } else { y })
    }

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        let (c, h, w) = sample_chw(input, &self.name)?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "{}: input has {c} channels, expects {}",
                self.name, self.spec.in_channels
            )));
        }
        let (oh, ow) = self.spec.output_hw(h, w)?;
        Ok(vec![self.spec.out_channels, oh, ow])
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
        if let Some(bn) = &self.bn {
            out.extend([&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        if let Some(bn) = &mut self.bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
            out.push(&mut bn.running_mean);
            out.push(&mut bn.running_var);
        }
    }
}

pub struct Pool {
    spec: PoolSpec,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl Pool {
    pub fn new(spec: PoolSpec) -> Self {
        Self { spec, cache: None }
    }
}

impl<T: Real> Layer<T> for Pool {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        let (y, argmax) = tensor::pool2d(x, &self.spec)?;
        self.cache = Some((x.shape().to_vec(), argmax));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = self.cache.take().ok_or_else(|| missing_cache("pool"))?;
        tensor::pool2d_backward(&shape, grad, &self.spec, &argmax)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::pool2d(x, &self.spec)?.0)
    }

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        let (c, h, w) = sample_chw(input, "pool")?;
        let (oh, ow) = self.spec.output_hw(h, w)?;
        Ok(vec![c, oh, ow])
    }

    fn params<'a>(&'a self, _out: &mut Vec<&'a Param<T>>) {}
    fn params_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut Param<T>>) {}
}

#[derive(Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl<T: Real> Layer<T> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        self.input_shape = Some(x.shape().to_vec());
        tensor::global_avg_pool(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("global_avg_pool"))?;
        tensor::global_avg_pool_backward(&shape, grad)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::global_avg_pool(x)
    }

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        let (c, _, _) = sample_chw(input, "global_avg_pool")?;
        Ok(vec![c])
    }

    fn params<'a>(&'a self, _out: &mut Vec<&'a Param<T>>) {}
    fn params_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut Param<T>>) {}
}

#[derive(Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl<T: Real> Layer<T> for Flatten {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        self.input_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.take().ok_or_else(|| missing_cache("flatten"))?;
        grad.clone().reshape(&shape)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        x.clone().reshape(&[n, x.len() / n])
    }

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        Ok(vec![input.iter().product()])
    }

    fn params<'a>(&'a self, _out: &mut Vec<&'a Param<T>>) {}
    fn params_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut Param<T>>) {}
}

/// Fully connected layer with `[D, M]` weights.
pub struct Dense<T> {
    name: String,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, gain: f64, init: &mut Initializer) -> Self {
        Self {
            name: name.to_string(),
            weight: Param::new(format!("{name}.weight"), init.fan_in(&[inputs, outputs], inputs, gain)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[outputs])),
            input: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.len() + self.bias.value.len()
    }
}

impl<T: Real> Layer<T> for Dense<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        let y = dense(x, &self.weight.value, &self.bias.value)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache(&self.name))?;
        let g = dense_backward(&x, &self.weight.value, grad)?;
        self.weight.accumulate(&g.weights)?;
        self.bias.accumulate(&g.bias)?;
        Ok(g.input)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dense(x, &self.weight.value, &self.bias.value)
    }

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        let d = self.weight.value.shape()[0];
        if input != [d] {
            return Err(Error::shape(format!("{}: expects [{d}] input, got {input:?}", self.name)));
        }
        Ok(vec![self.weight.value.shape()[1]])
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.extend([&self.weight, &self.bias]);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T> Default for Relu<T> {
    fn default() -> Self {
        Self { output: None }
    }
}

impl<T: Real> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        let y = tensor::relu(x);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().ok_or_else(|| missing_cache("relu"))?;
        tensor::relu_backward(&y, grad)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::relu(x))
    }

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        Ok(input.to_vec())
    }

    fn params<'a>(&'a self, _out: &mut Vec<&'a Param<T>>) {}
    fn params_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut Param<T>>) {}
}

pub struct Dropout {
    rate: f64,
    mask: Option<Option<DropoutMask>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, mask: None })
    }
}

impl<T: Real> Layer<T> for Dropout {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        let (y, mask) = tensor::dropout(x, self.rate, Mode::Train, ctx.next_seed())?;
        self.mask = Some(mask);
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("dropout"))?;
        tensor::dropout_backward(grad, mask.as_ref())
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        Ok(input.to_vec())
    }

    fn params<'a>(&'a self, _out: &mut Vec<&'a Param<T>>) {}
    fn params_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut Param<T>>) {}
}
