use super::{missing_cache, Layer, Param, SampleShape, TrainCtx};
use crate::error::{Error, Result};
use crate::tensor::{add_residual, add_residual_backward, concat_backward, concat_channels, Real, Tensor};

/// Layers applied one after another.
pub struct Seq<T> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Real> Seq<T> {
    pub fn new(layers: Vec<Box<dyn Layer<T>>>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, layer: Box<dyn Layer<T>>) {
        self.layers.push(layer);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Real> Layer<T> for Seq<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, ctx)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        for layer in &self.layers {
            layer.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for layer in &mut self.layers {
            layer.params_mut(out);
        }
    }
}

/// Parallel branches over the same input, concatenated along channels.
pub struct Concat<T> {
    branches: Vec<Box<dyn Layer<T>>>,
    channels: Option<Vec<usize>>,
}

impl<T: Real> Concat<T> {
    /// Builds the concat after checking every branch agrees on spatial size
    /// for the given input shape.
    pub fn new(branches: Vec<Box<dyn Layer<T>>>, input: &[usize]) -> Result<Self> {
        let concat = Self {
            branches,
            channels: None,
        };
        concat.output_shape(input)?;
        Ok(concat)
    }

    pub fn branches(&self) -> &[Box<dyn Layer<T>>] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [Box<dyn Layer<T>>] {
        &mut self.branches
    }
}

impl<T: Real> Layer<T> for Concat<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        let outs = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x, ctx))
            .collect::<Result<Vec<_>>>()?;
        self.channels = Some(outs.iter().map(|o| o.shape()[1]).collect());
        concat_channels(&outs.iter().collect::<Vec<_>>())
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let channels = self.channels.take().ok_or_else(|| missing_cache("concat"))?;
        let parts = concat_backward(grad, &channels)?;
        let mut total: Option<Tensor<T>> = None;
        for (branch, g) in self.branches.iter_mut().zip(parts) {
            let gx = branch.backward(&g)?;
            match &mut total {
                Some(t) => t.add_scaled(&gx, T::one())?,
                None => total = Some(gx),
            }
        }
        total.ok_or_else(|| Error::shape("concat without branches"))
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.infer(x))
            .collect::<Result<Vec<_>>>()?;
        concat_channels(&outs.iter().collect::<Vec<_>>())
    }

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        if self.branches.is_empty() {
            return Err(Error::shape("concat without branches"));
        }
        let mut channels = 0;
        let mut spatial: Option<(usize, usize)> = None;
        for (i, branch) in self.branches.iter().enumerate() {
            let shape = branch.output_shape(input)?;
            let [c, h, w] = shape[..] else {
                return Err(Error::shape(format!("branch {i} does not produce [C,H,W] maps")));
            };
            match spatial {
                Some(s) if s != (h, w) => {
                    return Err(Error::shape(format!(
                        "branch {i} produces {h}x{w} maps, branch 0 produces {}x{}",
                        s.0, s.1
                    )))
                }
                _ => spatial = Some((h, w)),
            }
            channels += c;
        }
        let (h, w) = spatial.expect("non-empty");
        Ok(vec![channels, h, w])
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        for b in &self.branches {
            b.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for b in &mut self.branches {
            b.params_mut(out);
        }
    }
}

/// `shortcut(x) + scale * body(x)`, where the shortcut is the identity or a
/// projection when the body changes the channel count.
pub struct Residual<T> {
    body: Box<dyn Layer<T>>,
    projection: Option<Box<dyn Layer<T>>>,
    scale: T,
}

impl<T: Real> Residual<T> {
    pub fn new(body: Box<dyn Layer<T>>, projection: Option<Box<dyn Layer<T>>>, scale: f64, input: &[usize]) -> Result<Self> {
        let res = Self {
            body,
            projection,
            scale: T::lift(scale),
        };
        res.output_shape(input)?;
        Ok(res)
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }
}

impl<T: Real> Layer<T> for Residual<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut TrainCtx) -> Result<Tensor<T>> {
        let fx = self.body.forward(x, ctx)?;
        let shortcut = match &mut self.projection {
            Some(p) => p.forward(x, ctx)?,
            None => x.clone(),
        };
        add_residual(&shortcut, &fx, self.scale)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (g_short, g_body) = add_residual_backward(grad, self.scale);
        let mut gx = self.body.backward(&g_body)?;
        let g_in = match &mut self.projection {
            Some(p) => p.backward(&g_short)?,
            None => g_short,
        };
        gx.add_scaled(&g_in, T::one())?;
        Ok(gx)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let fx = self.body.infer(x)?;
        let shortcut = match &self.projection {
            Some(p) => p.infer(x)?,
            None => x.clone(),
        };
        add_residual(&shortcut, &fx, self.scale)
    }

    fn output_shape(&self, input: &[usize]) -> Result<SampleShape> {
        let body = self.body.output_shape(input)?;
        let shortcut = match &self.projection {
            Some(p) => p.output_shape(input)?,
            None => input.to_vec(),
        };
        if body != shortcut {
            return Err(Error::shape(format!(
                "residual body produces {body:?} but shortcut produces {shortcut:?}"
            )));
        }
        Ok(body)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        self.body.params(out);
        if let Some(p) = &self.projection {
            p.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.body.params_mut(out);
        if let Some(p) = &mut self.projection {
            p.params_mut(out);
        }
    }
}
