//! Training loop: Adam, plateau learning-rate reduction, early stopping
//! and best-validation checkpointing.

mod optim;
mod schedule;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use optim::{Adam, AdamParams};
pub use schedule::{EarlyStopper, PlateauScheduler, StopDecision};

use crate::data::{epoch_order, make_batch, mix_seed, stream_batches, AugmentConfig, LoaderConfig, PatchTriplet};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, write_checkpoint, Checkpoint, Model, TrainingMeta};
use crate::nn::TrainCtx;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub lr_min: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Data-loader threads; 0 picks logical cores minus one.
    pub workers: usize,
    /// Write wall-clock seconds to the log; when off the column is 0 so
    /// logs of identical runs compare byte for byte.
    pub record_timing: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        Self {
            batch_size: 8,
            lr0: 1e-3,
            plateau_patience: 10,
            plateau_factor: 0.5,
            lr_min: 1e-10,
            early_stop_patience: 50,
            max_epochs: 1000,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            workers: 0,
            record_timing: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid(format!("plateau_factor {} outside (0, 1)", self.plateau_factor)));
        }
        if !(self.lr_min < self.lr0 && self.lr_min > 0.0) {
            return Err(Error::invalid(format!("need 0 < lr_min < lr0, got {} and {}", self.lr_min, self.lr0)));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("patiences must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }

    pub fn resolved_workers(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get().saturating_sub(1).max(1))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// What a per-epoch hook asks the loop to do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

pub struct TrainOutcome {
    /// Checkpoint of the epoch with the highest validation accuracy
    /// (earliest on ties).
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where to write the best checkpoint whenever it improves.
    pub checkpoint_path: Option<PathBuf>,
    /// Called after every epoch with the log row and the current model.
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<Box<dyn FnMut(&EpochLog, &Model) -> Result<Flow> + 'a>>,
}

/// Inference-mode accuracy over `set`.
pub fn accuracy(model: &Model, set: &[PatchTriplet]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let size = model.config().input_size;
    let mut correct = 0;
    for chunk in set.chunks(16) {
        let batch = make_batch(&chunk.iter().collect::<Vec<_>>(), size)?;
        let pred = argmax_rows(&model.logits(&batch.inputs)?);
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / set.len() as f64)
}

pub fn train(
    model: &mut Model,
    train_set: &[PatchTriplet],
    val_set: &[PatchTriplet],
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "training set of {} lesions is smaller than one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    if val_set.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let loader = LoaderConfig {
        batch_size: cfg.batch_size,
        input_size: model.config().input_size,
        augment: cfg.augment.clone(),
        workers: cfg.resolved_workers(),
        drop_last: true,
    };
    let mut adam = Adam::new(AdamParams {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    });
    let mut scheduler = PlateauScheduler::new(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor, cfg.lr_min);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience, cfg.max_epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let lr = scheduler.lr();
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let (mut loss_sum, mut batches, mut correct, mut seen) = (0.0, 0usize, 0usize, 0usize);
        stream_batches(train_set, &order, &loader, cfg.seed, epoch, |batch| {
            let mut ctx = TrainCtx::new(mix_seed(&[cfg.seed, epoch as u64, batches as u64, 0xd5]));
            model.zero_grad();
            let step = model.train_step(&batch.inputs, &batch.labels, &mut ctx)?;
            adam.step(&mut model.params_mut(), lr)?;
            loss_sum += step.loss;
            batches += 1;
            correct += step.correct;
            seen += batch.labels.len();
            Ok(())
        })?;
        let val_acc = accuracy(model, val_set)?;
        if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            let meta = TrainingMeta {
                epoch,
                best_val_accuracy: val_acc,
                seed: cfg.seed,
            };
            let ckpt = Checkpoint::from_model(model, meta);
            if let Some(path) = &opts.checkpoint_path {
                write_checkpoint(&ckpt, path)?;
            }
            best = Some((val_acc, ckpt));
        }
        scheduler.step(val_acc);
        let decision = stopper.step(val_acc);
        let row = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc,
            seconds: if cfg.record_timing { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        let flow = match &mut opts.on_epoch {
            Some(hook) => hook(&row, model)?,
            None => Flow::Continue,
        };
        log.push(row);
        if decision == StopDecision::Stop || flow == Flow::Stop {
            break;
        }
    }
    let (_, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { best, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::model::{build_model, ModelConfig};

    fn config() -> ModelConfig {
        ModelConfig {
            feature_width: 16,
            head_width: 16,
            input_size: (16, 16),
            patch_size: (16, 16),
            width_multiplier: 0.25,
            stem_channels: 8,
            stem_strides: (1, 1),
            factorized_kernel: 3,
            aux_channels: 4,
            ..ModelConfig::default()
        }
    }

    /// Bright-centre vs dark-centre patches.
    fn toy_set(n: usize, offset: u32) -> Vec<PatchTriplet> {
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Cyst } else { Label::Metastasis };
                let sign = if label == Label::Cyst { 1.0 } else { -1.0 };
                let data = (0..3 * 256)
                    .map(|k| {
                        let (r, c) = ((k % 256) / 16, k % 16);
                        let centre = (4..12).contains(&r) && (4..12).contains(&c);
                        let noise = ((k * 31 + i * 17) % 13) as f32 / 13.0 - 0.5;
                        let base = if centre { sign } else { -sign * 0.3 };
                        base + 0.3 * noise
                    })
                    .collect();
                PatchTriplet {
                    lesion_id: offset + i as u32,
                    label,
                    rows: 16,
                    cols: 16,
                    data,
                }
            })
            .collect()
    }

    fn quick_cfg(max_epochs: usize) -> TrainConfig {
        TrainConfig {
            max_epochs,
            seed: 3,
            workers: 1,
            record_timing: false,
            augment: AugmentConfig {
                enabled: false,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let mut model = build_model(&config(), 1).unwrap();
        let set = toy_set(8, 1);
        let batch = make_batch(&set.iter().collect::<Vec<_>>(), (16, 16)).unwrap();
        let mut adam = Adam::new(AdamParams::default());
        let mut losses = Vec::new();
        for _ in 0..6 {
            model.zero_grad();
            let out = model.train_step(&batch.inputs, &batch.labels, &mut TrainCtx::new(9)).unwrap();
            adam.step(&mut model.params_mut(), 1e-3).unwrap();
            losses.push(out.loss);
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn best_checkpoint_and_log_invariants() {
        let mut model = build_model(&config(), 2).unwrap();
        let out = train(&mut model, &toy_set(16, 1), &toy_set(6, 100), &quick_cfg(6), TrainOptions::default()).unwrap();
        assert_eq!(out.log.len(), 6);
        assert!(out.log.windows(2).all(|w| w[1].lr <= w[0].lr));
        let max = out.log.iter().map(|r| r.val_acc).fold(f64::MIN, f64::max);
        assert_eq!(out.best.meta.best_val_accuracy, max);
        let first = out.log.iter().find(|r| r.val_acc == max).unwrap();
        assert_eq!(out.best.meta.epoch, first.epoch);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut model = build_model(&config(), 4).unwrap();
            let cfg = TrainConfig {
                augment: AugmentConfig::default(),
                ..quick_cfg(2)
            };
            let out = train(&mut model, &toy_set(16, 1), &toy_set(4, 50), &cfg, TrainOptions::default()).unwrap();
            (out.log, out.best.to_bytes().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn hook_can_stop_training() {
        let mut model = build_model(&config(), 5).unwrap();
        let opts = TrainOptions {
            on_epoch: Some(Box::new(|row: &EpochLog, _: &Model| {
                Ok(if row.epoch == 2 { Flow::Stop } else { Flow::Continue })
            })),
            ..TrainOptions::default()
        };
        let out = train(&mut model, &toy_set(8, 1), &toy_set(2, 50), &quick_cfg(10), opts).unwrap();
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn log_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows = vec![EpochLog {
            epoch: 1,
            lr: 1e-3,
            train_loss: 0.5,
            train_acc: 0.75,
            val_acc: 0.5,
            seconds: 0.0,
        }];
        write_log(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,train_acc,val_acc,seconds\n"));
        assert_eq!(read_log(&path).unwrap(), rows);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig {
            plateau_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(TrainConfig::default().batch_size, 8);
    }
}
