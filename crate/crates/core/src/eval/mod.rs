//! Test-set metrics, ROC analysis, report files and overlay images.

mod metrics;
mod overlay;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{compute_metrics, roc_auc, Confusion, Metrics, RocPoint};
pub use overlay::{render_overlay, window, RgbImage, WINDOW_LEVEL, WINDOW_WIDTH};

use crate::data::{make_batch, Label, PatchTriplet};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionPrediction {
    pub lesion_id: u32,
    pub label: Label,
    pub predicted: Label,
    pub prob_metastasis: f64,
}

/// Metrics in report column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

pub const METRIC_COLUMNS: [&str; 7] = [
    "Accuracy",
    "Balanced Accuracy",
    "F1",
    "AUC",
    "Precision",
    "Recall",
    "Specificity",
];

impl MetricSummary {
    pub fn values(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.balanced_accuracy,
            self.f1,
            self.auc,
            self.precision,
            self.recall,
            self.specificity,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub metrics: MetricSummary,
    pub undefined_metrics: Vec<String>,
    pub roc_points: Vec<RocPoint>,
    /// Sorted by lesion id.
    pub predictions: Vec<LesionPrediction>,
}

/// Metastasis probability per lesion, in the order given.
pub fn predict_set(model: &Model, set: &[&PatchTriplet]) -> Result<Vec<f64>> {
    let size = model.config().input_size;
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.chunks(16) {
        let batch = make_batch(chunk, size)?;
        let probs = model.predict(&batch.inputs)?;
        out.extend(probs.data().chunks(2).map(|r| r[1] as f64));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, test: &[PatchTriplet]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let mut sorted: Vec<&PatchTriplet> = test.iter().collect();
    sorted.sort_by_key(|t| t.lesion_id);
    let size = model.config().input_size;
    let mut predictions = Vec::with_capacity(sorted.len());
    for chunk in sorted.chunks(16) {
        let batch = make_batch(chunk, size)?;
        let logits = model.logits(&batch.inputs)?;
        let probs = crate::tensor::softmax(&logits)?;
        for ((t, p), row) in chunk.iter().zip(argmax_rows(&logits)).zip(probs.data().chunks(2)) {
            predictions.push(LesionPrediction {
                lesion_id: t.lesion_id,
                label: t.label,
                predicted: Label::from_index(p)?,
                prob_metastasis: row[1] as f64,
            });
        }
    }
    let truth: Vec<usize> = predictions.iter().map(|p| p.label.index()).collect();
    let pred: Vec<usize> = predictions.iter().map(|p| p.predicted.index()).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.prob_metastasis).collect();
    let confusion = Confusion::from_predictions(&truth, &pred)?;
    let m = compute_metrics(&confusion)?;
    let (roc_points, auc) = roc_auc(&scores, &truth)?;
    Ok(EvalReport {
        confusion,
        metrics: MetricSummary {
            accuracy: m.accuracy,
            balanced_accuracy: m.balanced_accuracy,
            f1: m.f1,
            auc,
            precision: m.precision,
            recall: m.recall,
            specificity: m.specificity,
        },
        undefined_metrics: m.undefined,
        roc_points,
        predictions,
    })
}

/// Writes `report.json`, `metrics.csv` and `roc.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))?;

    let path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(METRIC_COLUMNS)?;
    w.write_record(report.metrics.values().map(|v| format!("{v:.6}")))?;
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("roc.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["fpr", "tpr", "threshold"])?;
    for p in &report.roc_points {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
