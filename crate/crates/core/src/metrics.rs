//! Segmentation metrics: confusion matrices and pixel-share weighted scores.
//!
//! Label 0 is background. Class weights are ground-truth pixel shares over
//! the foreground classes unless background weighting is switched on. The
//! reported `m*` values are per-image scores averaged over images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no images to evaluate")]
    EmptyEvaluationSet,
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: u8, num_labels: usize },
    #[error("no reports to combine")]
    EmptyInput,
    #[error("report weight must be positive, got {0}")]
    NonPositiveWeight(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Square count matrix, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_labels: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_labels: usize) -> Self {
        Self { num_labels, counts: vec![0; num_labels * num_labels] }
    }

    pub fn from_masks(pred: &[u8], truth: &[u8], num_labels: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(MetricsError::ShapeMismatch(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut cm = Self::new(num_labels);
        for (&p, &t) in pred.iter().zip(truth) {
            for label in [p, t] {
                if label as usize >= num_labels {
                    return Err(MetricsError::LabelOutOfRange { label, num_labels });
                }
            }
            cm.counts[t as usize * num_labels + p as usize] += 1;
        }
        Ok(cm)
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_labels + pred]
    }

    /// Confusion matrices merge by addition.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_labels, other.num_labels, "label spaces differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    /// Ground-truth pixel count of `class`.
    pub fn support(&self, class: usize) -> u64 {
        (0..self.num_labels).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.num_labels).map(|t| self.get(t, class)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.num_labels).map(|c| self.get(c, c)).sum();
        correct as f64 / total as f64
    }

    pub fn scores(&self, class: usize) -> ClassScores {
        let tp = self.true_positives(class) as f64;
        let fp = self.predicted(class) as f64 - tp;
        let fn_ = self.support(class) as f64 - tp;
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        ClassScores {
            class,
            support: self.support(class),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Score each image, then average over images.
    #[default]
    OverImages,
    /// Score the summed confusion matrix once.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricConfig {
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default)]
    pub weight_background: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub macc: f64,
    pub mwp: f64,
    pub mwf1: f64,
    pub mwiou: f64,
    /// Scores from the pooled confusion matrix, one per label.
    pub per_class: Vec<ClassScores>,
    /// Pooled ground-truth pixel share used as class weight, one per label.
    pub weights: Vec<f64>,
    pub images: usize,
}

struct Weighted {
    precision: f64,
    f1: f64,
    iou: f64,
}

fn class_weights(cm: &ConfusionMatrix, weight_background: bool) -> Vec<f64> {
    let n = cm.num_labels();
    let first = if weight_background { 0 } else { 1 };
    let total: u64 = (first..n).map(|c| cm.support(c)).sum();
    let mut weights = vec![0.0; n];
    if total == 0 {
        // Nothing but background in the ground truth.
        weights[0] = 1.0;
        return weights;
    }
    for (c, w) in weights.iter_mut().enumerate().skip(first) {
        *w = cm.support(c) as f64 / total as f64;
    }
    weights
}

fn weighted_scores(cm: &ConfusionMatrix, weights: &[f64]) -> Weighted {
    let mut out = Weighted { precision: 0.0, f1: 0.0, iou: 0.0 };
    for (c, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let s = cm.scores(c);
        out.precision += w * s.precision;
        out.f1 += w * s.f1;
        out.iou += w * s.iou;
    }
    out
}

pub fn evaluate(pred: &[Vec<u8>], truth: &[Vec<u8>], num_labels: usize) -> Result<MetricReport> {
    evaluate_with(pred, truth, num_labels, MetricConfig::default())
}

pub fn evaluate_with(
    pred: &[Vec<u8>],
    truth: &[Vec<u8>],
    num_labels: usize,
    config: MetricConfig,
) -> Result<MetricReport> {
    if pred.is_empty() && truth.is_empty() {
        return Err(MetricsError::EmptyEvaluationSet);
    }
    if pred.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} predicted masks vs {} ground-truth masks",
            pred.len(),
            truth.len()
        )));
    }
    let mut pooled = ConfusionMatrix::new(num_labels);
    let (mut acc, mut p, mut f1, mut iou) = (0.0, 0.0, 0.0, 0.0);
    for (pm, tm) in pred.iter().zip(truth) {
        let cm = ConfusionMatrix::from_masks(pm, tm, num_labels)?;
        if config.averaging == Averaging::OverImages {
            let w = weighted_scores(&cm, &class_weights(&cm, config.weight_background));
            acc += cm.accuracy();
            p += w.precision;
            f1 += w.f1;
            iou += w.iou;
        }
        pooled.merge(&cm);
    }
    let weights = class_weights(&pooled, config.weight_background);
    let (macc, mwp, mwf1, mwiou) = match config.averaging {
        Averaging::OverImages => {
            let n = pred.len() as f64;
            (acc / n, p / n, f1 / n, iou / n)
        }
        Averaging::Pooled => {
            let w = weighted_scores(&pooled, &weights);
            (pooled.accuracy(), w.precision, w.f1, w.iou)
        }
    };
    Ok(MetricReport {
        macc,
        mwp,
        mwf1,
        mwiou,
        per_class: (0..num_labels).map(|c| pooled.scores(c)).collect(),
        weights,
        images: pred.len(),
    })
}

/// Weighted mean that returns the common value exactly when all values agree.
fn weighted_mean(values: impl Iterator<Item = f64> + Clone, weights: &[f64]) -> f64 {
    let mut it = values.clone();
    if let Some(first) = it.next() {
        if it.all(|v| v == first) {
            return first;
        }
    }
    let total: f64 = weights.iter().sum();
    values.zip(weights).map(|(v, w)| v * w).sum::<f64>() / total
}

/// Size-weighted combination of per-client reports.
pub fn overall(reports: &[(&MetricReport, f64)]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(&(_, w)) = reports.iter().find(|(_, w)| w.is_nan() || *w <= 0.0) {
        return Err(MetricsError::NonPositiveWeight(w));
    }
    let weights: Vec<f64> = reports.iter().map(|(_, w)| *w).collect();
    let field = |f: fn(&MetricReport) -> f64| weighted_mean(reports.iter().map(move |(r, _)| f(r)), &weights);

    let labels = reports[0].0.per_class.len();
    let same_labels = reports.iter().all(|(r, _)| r.per_class.len() == labels && r.weights.len() == labels);
    let (per_class, class_weights) = if same_labels {
        let per_class = (0..labels)
            .map(|c| {
                let pick = |f: fn(&ClassScores) -> f64| {
                    weighted_mean(reports.iter().map(move |(r, _)| f(&r.per_class[c])), &weights)
                };
                ClassScores {
                    class: c,
                    support: reports.iter().map(|(r, _)| r.per_class[c].support).sum(),
                    precision: pick(|s| s.precision),
                    recall: pick(|s| s.recall),
                    f1: pick(|s| s.f1),
                    iou: pick(|s| s.iou),
                }
            })
            .collect();
        let class_weights =
            (0..labels).map(|c| weighted_mean(reports.iter().map(|(r, _)| r.weights[c]), &weights)).collect();
        (per_class, class_weights)
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(MetricReport {
        macc: field(|r| r.macc),
        mwp: field(|r| r.mwp),
        mwf1: field(|r| r.mwf1),
        mwiou: field(|r| r.mwiou),
        per_class,
        weights: class_weights,
        images: reports.iter().map(|(r, _)| r.images).sum(),
    })
}
