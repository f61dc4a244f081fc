use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2×2 counts; rows are true labels, columns predictions, index 1 is
/// metastasis (the positive class).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; 2]; 2]);

impl Confusion {
    pub fn from_counts(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        Self([[tn, fp], [fn_, tp]])
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape("truth and prediction lengths differ"));
        }
        let mut m = [[0u64; 2]; 2];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t > 1 || p > 1 {
                return Err(Error::invalid("binary labels must be 0 or 1"));
            }
            m[t][p] += 1;
        }
        Ok(Self(m))
    }

    pub fn tp(&self) -> u64 {
        self.0[1][1]
    }
    pub fn tn(&self) -> u64 {
        self.0[0][0]
    }
    pub fn fp(&self) -> u64 {
        self.0[0][1]
    }
    pub fn fn_(&self) -> u64 {
        self.0[1][0]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    /// Names of metrics whose denominator was zero (reported as 0).
    pub undefined: Vec<String>,
}

pub fn compute_metrics(c: &Confusion) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let (tp, tn, fp, fn_) = (c.tp() as f64, c.tn() as f64, c.fp() as f64, c.fn_() as f64);
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fn_);
    let specificity = ratio("specificity", tn, tn + fp);
    let f1 = ratio("f1", 2.0 * precision * recall, precision + recall);
    Ok(Metrics {
        accuracy: (tp + tn) / total as f64,
        balanced_accuracy: (recall + specificity) / 2.0,
        f1,
        precision,
        recall,
        specificity,
        undefined,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; the first point uses +inf
    /// (`null` in JSON).
    #[serde(with = "infinite_as_null")]
    pub threshold: f64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// ROC over unique score thresholds (descending) and its trapezoid area.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("ROC score {s}")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("binary labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let p = RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold,
        };
        let last = points.last().expect("starting point");
        auc += (p.fpr - last.fpr) * (p.tpr + last.tpr) / 2.0;
        points.push(p);
    }
    Ok((points, auc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-4
    }

    #[test]
    fn perfect_matrix() {
        let m = compute_metrics(&Confusion([[23, 0], [0, 23]])).unwrap();
        for v in [m.accuracy, m.balanced_accuracy, m.f1, m.precision, m.recall, m.specificity] {
            assert_eq!(v, 1.0);
        }
        assert!(m.undefined.is_empty());
    }

    #[test]
    fn worked_example() {
        let m = compute_metrics(&Confusion::from_counts(20, 3, 2, 21)).unwrap();
        assert!(close(m.accuracy, 41.0 / 46.0));
        assert!(close(m.precision, 20.0 / 22.0));
        assert!(close(m.recall, 20.0 / 23.0));
        assert!(close(m.specificity, 21.0 / 23.0));
        assert!(close(m.balanced_accuracy, 0.8913));
        assert!(close(m.f1, 0.8889));
    }

    #[test]
    fn zero_denominator_is_flagged() {
        let m = compute_metrics(&Confusion::from_counts(0, 5, 0, 5)).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(m.undefined.contains(&"precision".to_string()));
        assert!(compute_metrics(&Confusion::default()).is_err());
    }

    #[test]
    fn auc_examples() {
        let (_, a) = roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(a, 1.0);
        let (_, a) = roc_auc(&[0.9, 0.2, 0.5, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        let (pts, a) = roc_auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(pts.len(), 2);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn roc_endpoints_and_monotonicity() {
        let (pts, _) = roc_auc(&[0.3, 0.7, 0.7, 0.1, 0.9], &[0, 1, 0, 0, 1]).unwrap();
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        assert!(pts[0].threshold.is_infinite());
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(pts.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
    }
}
