//! The full lesion classifier: Inception-style backbone, global average
//! pooling and a two-layer fully connected head with dropout.

mod checkpoint;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::blocks::{build_block, AuxClassifier, BlockConfig, DEFAULT_RESIDUAL_SCALE};
use crate::data::TripletPlanes;
use crate::error::{Error, Result};
use crate::nn::{grad_norm, ConvUnit, Dense, Dropout, GlobalAvgPool, Initializer, Layer, Param, Relu, Seq, TrainCtx};
use crate::tensor::{smoothed_cross_entropy, softmax, ConvSpec, Padding, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    InceptionPlain,
    InceptionResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Channels produced by the backbone's final 1×1 convolution.
    pub feature_width: usize,
    pub head_width: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub label_smoothing_eps: f64,
    pub aux_weight: f64,
    /// Network input `(height, width)`; patches are resized to this.
    pub input_size: (usize, usize),
    /// Padded patch size `(rows, cols)` produced by data preparation.
    pub patch_size: (usize, usize),
    pub triplet_planes: TripletPlanes,
    pub pretrained: Option<PathBuf>,
    pub width_multiplier: f64,
    pub stem_channels: usize,
    pub stem_strides: (usize, usize),
    pub factorized_kernel: usize,
    pub residual_scale: f64,
    /// Backbone block after which the auxiliary classifier attaches (1-based).
    pub aux_attach: Option<usize>,
    pub aux_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::InceptionResidual,
            feature_width: 256,
            head_width: 512,
            dropout_rate: 0.4,
            num_classes: 2,
            label_smoothing_eps: 0.1,
            aux_weight: 0.3,
            input_size: (128, 128),
            patch_size: (252, 210),
            triplet_planes: TripletPlanes::Orthogonal,
            pretrained: None,
            width_multiplier: 1.0,
            stem_channels: 32,
            stem_strides: (2, 2),
            factorized_kernel: 5,
            residual_scale: DEFAULT_RESIDUAL_SCALE,
            aux_attach: Some(6),
            aux_channels: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::invalid(format!("num_classes must be 2, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing_eps) {
            return Err(Error::invalid(format!(
                "label_smoothing_eps {} outside [0, 1)",
                self.label_smoothing_eps
            )));
        }
        if self.aux_weight < 0.0 {
            return Err(Error::invalid("aux_weight must be non-negative"));
        }
        for (name, v) in [
            ("feature_width", self.feature_width),
            ("head_width", self.head_width),
            ("stem_channels", self.stem_channels),
            ("aux_channels", self.aux_channels),
            ("input height", self.input_size.0),
            ("input width", self.input_size.1),
            ("patch rows", self.patch_size.0),
            ("patch cols", self.patch_size.1),
            ("stem stride", self.stem_strides.0),
            ("stem stride", self.stem_strides.1),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.width_multiplier <= 0.0 {
            return Err(Error::invalid("width_multiplier must be positive"));
        }
        Ok(())
    }
}

/// Logits of one training forward pass.
pub struct ForwardOutput {
    pub logits: Tensor<f32>,
    pub aux_logits: Option<Tensor<f32>>,
}

/// Loss and accuracy bookkeeping of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub main_loss: f64,
    pub aux_loss: f64,
    pub correct: usize,
}

pub struct Model {
    config: ModelConfig,
    stem: Seq<f32>,
    blocks: Vec<Box<dyn Layer<f32>>>,
    aux: Option<AuxClassifier<f32>>,
    head: Seq<f32>,
    head_params: usize,
}

pub const INPUT_CHANNELS: usize = 3;

fn block_plan(cfg: &ModelConfig) -> Vec<(&'static str, BlockConfig)> {
    let m = cfg.width_multiplier;
    let residual = |b: BlockConfig| match cfg.backbone {
        Backbone::InceptionResidual => b.residual(cfg.residual_scale),
        Backbone::InceptionPlain => b,
    };
    vec![
        ("mixed_a1", residual(BlockConfig::module_a(m))),
        ("mixed_a2", residual(BlockConfig::module_a(m))),
        ("reduction1", BlockConfig::grid_reduction(m)),
        ("mixed_b1", residual(BlockConfig::factorized(cfg.factorized_kernel, m))),
        ("mixed_b2", residual(BlockConfig::factorized(cfg.factorized_kernel, m))),
        ("reduction2", BlockConfig::grid_reduction(m)),
        ("mixed_c1", residual(BlockConfig::expanded_filter_bank(m))),
    ]
}

/// Assembles the classifier for `cfg`, initialized under `seed` and then
/// overwritten from `cfg.pretrained` when set.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::random(cfg, seed)?;
    if let Some(path) = &cfg.pretrained {
        let ckpt = read_checkpoint(path)?;
        model.import_pretrained(&ckpt)?;
    }
    Ok(model)
}

impl Model {
    fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new(seed);
        let (h, w) = cfg.input_size;
        let stem_a = ConvSpec::square(3, cfg.stem_strides.0, Padding::Same, INPUT_CHANNELS, cfg.stem_channels / 2)?;
        let stem_b = ConvSpec::square(3, cfg.stem_strides.1, Padding::Same, cfg.stem_channels / 2, cfg.stem_channels)?;
        let stem = Seq::new(vec![
            Box::new(ConvUnit::conv_bn_relu("stem.conv0", stem_a, &mut init)?),
            Box::new(ConvUnit::conv_bn_relu("stem.conv1", stem_b, &mut init)?),
        ]);
        let mut shape = stem.output_shape(&[INPUT_CHANNELS, h, w])?;

        let plan = block_plan(cfg);
        let attach = cfg.aux_attach;
        if let Some(k) = attach {
            if k == 0 || k > plan.len() + 1 {
                return Err(Error::invalid(format!(
                    "aux_attach {k} must name a backbone block in 1..={}",
                    plan.len() + 1
                )));
            }
        }
        let mut blocks: Vec<Box<dyn Layer<f32>>> = Vec::with_capacity(plan.len() + 1);
        let mut aux = None;
        for (name, block_cfg) in &plan {
            let block = build_block(&format!("backbone.{name}"), block_cfg, &shape, &mut init)?;
            shape = block.output_shape(&shape)?;
            blocks.push(block);
            if attach == Some(blocks.len()) {
                aux = Some(AuxClassifier::new("aux", &shape, cfg.aux_channels, cfg.num_classes, &mut init)?);
            }
        }
        let proj = ConvSpec::square(1, 1, Padding::Same, shape[0], cfg.feature_width)?;
        blocks.push(Box::new(ConvUnit::conv_bn_relu("backbone.features", proj, &mut init)?));
        shape = blocks.last().expect("features").output_shape(&shape)?;
        if attach == Some(blocks.len()) {
            aux = Some(AuxClassifier::new("aux", &shape, cfg.aux_channels, cfg.num_classes, &mut init)?);
        }

        let fc1 = Dense::new("head.fc1", cfg.feature_width, cfg.head_width, 2f64.sqrt(), &mut init);
        let fc2 = Dense::new("head.fc2", cfg.head_width, cfg.head_width, 2f64.sqrt(), &mut init);
        let fc3 = Dense::new("head.logits", cfg.head_width, cfg.num_classes, 1.0, &mut init);
        let head_params = fc1.param_count() + fc2.param_count() + fc3.param_count();
        let head = Seq::new(vec![
            Box::new(GlobalAvgPool::default()),
            Box::new(fc1),
            Box::new(Relu::default()),
            Box::new(Dropout::new(cfg.dropout_rate)?),
            Box::new(fc2),
            Box::new(Relu::default()),
            Box::new(Dropout::new(cfg.dropout_rate)?),
            Box::new(fc3),
        ]);
        Ok(Self {
            config: cfg.clone(),
            stem,
            blocks,
            aux,
            head,
            head_params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_param_count(&self) -> usize {
        self.head_params
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != INPUT_CHANNELS {
            return Err(Error::shape(format!("model expects {INPUT_CHANNELS} input channels, got {c}")));
        }
        if (h, w) != self.config.input_size {
            return Err(Error::shape(format!(
                "model expects {}x{} inputs, got {h}x{w}",
                self.config.input_size.0, self.config.input_size.1
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass (batch statistics, active dropout).
    pub fn forward_train(&mut self, x: &Tensor<f32>, ctx: &mut TrainCtx) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x, ctx)?;
        let mut aux_logits = None;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = block.forward(&h, ctx)?;
            if self.config.aux_attach == Some(i + 1) {
                if let Some(aux) = &mut self.aux {
                    aux_logits = Some(aux.forward(&h, ctx)?);
                }
            }
        }
        let logits = self.head.forward(&h, ctx)?;
        Ok(ForwardOutput { logits, aux_logits })
    }

    /// Backpropagates logit gradients; returns the gradient at the input.
    pub fn backward(&mut self, grad_logits: &Tensor<f32>, grad_aux: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut g = self.head.backward(grad_logits)?;
        let attach = self.config.aux_attach;
        for i in (0..self.blocks.len()).rev() {
            if attach == Some(i + 1) {
                if let (Some(aux), Some(ga)) = (&mut self.aux, grad_aux) {
                    let extra = aux.backward(ga)?;
                    g.add_scaled(&extra, 1.0)?;
                }
            }
            g = self.blocks[i].backward(&g)?;
        }
        self.stem.backward(&g)
    }

    /// Forward, smoothed cross-entropy (main + weighted auxiliary) and
    /// backward for one batch. Gradients accumulate into the parameters.
    pub fn train_step(&mut self, x: &Tensor<f32>, labels: &[usize], ctx: &mut TrainCtx) -> Result<StepOutput> {
        let eps = self.config.label_smoothing_eps;
        let aux_weight = self.config.aux_weight;
        let out = self.forward_train(x, ctx)?;
        let main = smoothed_cross_entropy(&out.logits, labels, eps)?;
        let mut loss = main.loss;
        let mut aux_loss = 0.0;
        let mut aux_grad = None;
        if let Some(aux_logits) = out.aux_logits.as_ref().filter(|_| aux_weight > 0.0) {
            let a = smoothed_cross_entropy(aux_logits, labels, eps)?;
            aux_loss = a.loss;
            loss += aux_weight * a.loss;
            aux_grad = Some(a.grad.map(|g| g * aux_weight as f32));
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss ({loss})")));
        }
        let correct = argmax_rows(&out.logits)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        self.backward(&main.grad, aux_grad.as_ref())?;
        Ok(StepOutput {
            loss,
            main_loss: main.loss,
            aux_loss,
            correct,
        })
    }

    /// Inference-mode logits. Never mutates the model.
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(x)?;
        let mut h = self.stem.infer(x)?;
        for block in &self.blocks {
            h = block.infer(&h)?;
        }
        self.head.infer(&h)
    }

    /// Class probabilities `[N, 2]` (column 1 is metastasis).
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        softmax(&self.logits(x)?)
    }

    pub fn params(&self) -> Vec<&Param<f32>> {
        let mut out = Vec::new();
        self.stem.params(&mut out);
        for b in &self.blocks {
            b.params(&mut out);
        }
        if let Some(aux) = &self.aux {
            aux.params(&mut out);
        }
        self.head.params(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut out = Vec::new();
        self.stem.params_mut(&mut out);
        for b in &mut self.blocks {
            b.params_mut(&mut out);
        }
        if let Some(aux) = &mut self.aux {
            aux.params_mut(&mut out);
        }
        self.head.params_mut(&mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Gradient norm over the stem parameters.
    pub fn stem_grad_norm(&self) -> f64 {
        let mut out = Vec::new();
        self.stem.params(&mut out);
        grad_norm(&out)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Copies every blob whose name matches a model tensor. Blobs unknown to
    /// this architecture are skipped; any shape conflict aborts the import.
    pub fn import_pretrained(&mut self, ckpt: &Checkpoint) -> Result<usize> {
        let mut conflicts = Vec::new();
        let mut updates = Vec::new();
        for p in self.params() {
            if let Some(blob) = ckpt.blob(&p.name) {
                if blob.shape() != p.value.shape() {
                    conflicts.push(format!(
                        "{}: checkpoint {:?} vs model {:?}",
                        p.name,
                        blob.shape(),
                        p.value.shape()
                    ));
                } else {
                    updates.push(p.name.clone());
                }
            }
        }
        if !conflicts.is_empty() {
            return Err(Error::BlobShapes(conflicts));
        }
        let count = updates.len();
        for p in self.params_mut() {
            if let Some(blob) = ckpt.blob(&p.name) {
                p.value = blob.clone();
            }
        }
        Ok(count)
    }
}

pub fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let k = t.shape().get(1).copied().unwrap_or(1);
    t.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
