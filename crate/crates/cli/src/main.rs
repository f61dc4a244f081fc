use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use hepalesion::config::RunConfig;
use hepalesion::phantom::{generate, PhantomSpec};
use hepalesion::pipeline::{eval_run, predict_run, prepare, train_run, CHECKPOINT_FILE};
use hepalesion::train::TrainOptions;

/// Liver lesion classification (cyst vs. metastasis) from segmented CT.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset (volumes, masks, manifest.csv).
    GenPhantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of lesions.
        #[arg(long, default_value_t = 230)]
        count: usize,
    },
    /// Extract normalized patch triplets and write the split and archive.
    Prepare {
        /// Dataset directory holding the manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train on a prepared directory; writes best.ckpt, log.csv and config.json.
    Train {
        /// A directory written by `prepare`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// Data-loader threads (default: logical cores minus one).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Checkpoint to initialize matching weights from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a prepared directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify every lesion of one volume and render overlays.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for splitting, initialization and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config value, e.g. `--set train.lr0=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, extra: &[String]) -> hepalesion::Result<RunConfig> {
        let mut all = self.overrides.clone();
        if let Some(s) = self.seed {
            all.push(format!("seed={s}"));
            all.push(format!("train.seed={s}"));
        }
        all.extend_from_slice(extra);
        RunConfig::resolve(self.config.as_deref(), &all)
    }
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    // argument and config problems are reported before anything is written
    let result = match cli.command {
        Command::GenPhantom { out, seed, count } => {
            let spec = PhantomSpec {
                n_lesions: count,
                seed,
                ..PhantomSpec::default()
            };
            if let Err(e) = spec.validate() {
                return usage_error(e);
            }
            gen_phantom(&spec, &out)
        }
        Command::Prepare { data, out, run } => match run.resolve(&[]) {
            Ok(cfg) => run_prepare(&data, &cfg, &out),
            Err(e) => return usage_error(e),
        },
        Command::Train {
            data,
            out,
            run,
            workers,
            max_epochs,
            pretrained,
        } => {
            let mut extra = Vec::new();
            if let Some(w) = workers {
                extra.push(format!("train.workers={w}"));
            }
            if let Some(m) = max_epochs {
                extra.push(format!("train.max_epochs={m}"));
            }
            if let Some(p) = pretrained {
                extra.push(format!("model.pretrained={}", serde_json::Value::String(p.display().to_string())));
            }
            match run.resolve(&extra) {
                Ok(cfg) => run_train(&data, &cfg, &out),
                Err(e) => return usage_error(e),
            }
        }
        Command::Eval { checkpoint, data, out } => run_eval(&checkpoint, &data, &out),
        Command::Predict {
            checkpoint,
            volume,
            mask,
            out,
        } => run_predict(&checkpoint, &volume, &mask, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn gen_phantom(spec: &PhantomSpec, out: &Path) -> Result<()> {
    let summary = generate(spec, out).context("generating phantom")?;
    println!("wrote {} lesions to {}", summary.lesions.len(), summary.manifest.display());
    Ok(())
}

fn run_prepare(data: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let prepared = prepare(data, cfg, out).context("preparing patches")?;
    let s = &prepared.split;
    println!(
        "prepared {} lesions: train {}, val {}, test {}",
        prepared.archive.triplets.len(),
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    Ok(())
}

fn run_train(data: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let opts = TrainOptions {
        on_epoch: Some(Box::new(|row, _| {
            println!(
                "epoch {:4}  lr {:.2e}  loss {:.4}  train {:.3}  val {:.3}",
                row.epoch, row.lr, row.train_loss, row.train_acc, row.val_acc
            );
            Ok(hepalesion::train::Flow::Continue)
        })),
        ..TrainOptions::default()
    };
    let outcome = train_run(data, cfg, out, opts).context("training")?;
    println!(
        "best val accuracy {:.4} at epoch {}; checkpoint {}",
        outcome.best.meta.best_val_accuracy,
        outcome.best.meta.epoch,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let report = eval_run(checkpoint, data, out).context("evaluating")?;
    let m = &report.metrics;
    println!(
        "accuracy {:.4}  balanced {:.4}  f1 {:.4}  auc {:.4}  precision {:.4}  recall {:.4}  specificity {:.4}",
        m.accuracy, m.balanced_accuracy, m.f1, m.auc, m.precision, m.recall, m.specificity
    );
    Ok(())
}

fn run_predict(checkpoint: &Path, volume: &Path, mask: &Path, out: &Path) -> Result<()> {
    let results = predict_run(checkpoint, volume, mask, out).context("predicting")?;
    for r in &results {
        println!("lesion {:5}  {:10}  p(metastasis) {:.4}", r.lesion_id, r.predicted.as_str(), r.prob_metastasis);
    }
    Ok(())
}
