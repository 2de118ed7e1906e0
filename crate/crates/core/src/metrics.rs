//! Classification and detection metrics.
//!
//! Precision, recall and F1 are averaged with per-class support weights, so
//! the reported recall always equals accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized `(x1, y1, x2, y2)` corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    /// Builds a canonical box (corners ordered so `x2 >= x1`, `y2 >= y1`).
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1: x1.min(x2), y1: y1.min(y2), x2: x1.max(x2), y2: y1.max(y2) }
    }

    pub fn coords(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 as f64 - self.x1 as f64).max(0.0) * (self.y2 as f64 - self.y1 as f64).max(0.0)
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<Vec<u64>>,
    labels: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let classes = counts.len();
        if counts.iter().any(|r| r.len() != classes) {
            return Err(Error::data("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { classes, labels: (0..classes).map(|c| c.to_string()).collect(), counts })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.classes {
            return Err(Error::data(format!("{} class labels given for {} classes", labels.len(), self.classes)));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::data(format!("{} true labels but {} predictions", truth.len(), pred.len())));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= classes || p >= classes {
            return Err(Error::data(format!("sample {i}: label pair ({t}, {p}) outside [0, {classes})")));
        }
        counts[t][p] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::config("classification report needs at least one sample"));
    }
    let c = cm.classes();
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut per_class = Vec::with_capacity(c);
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    let mut trace = 0u64;
    for k in 0..c {
        let tp = cm.get(k, k);
        trace += tp;
        let predicted: u64 = (0..c).map(|t| cm.get(t, k)).sum();
        let support = cm.support(k);
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let weight = support as f64;
        wp += weight * precision;
        wr += weight * recall;
        wf += weight * f1;
        per_class.push(ClassMetrics { precision, recall, f1, support });
    }
    let n = total as f64;
    Ok(ClassificationReport { accuracy: trace as f64 / n, precision: wp / n, recall: wr / n, f1: wf / n, per_class })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionReport {
    pub classification: ClassificationReport,
    /// Mean IoU over samples whose target has a box; `None` when there are none.
    pub mean_iou: Option<f64>,
    pub iou_at_50: usize,
    pub boxed_samples: usize,
}

/// Scores predicted labels and boxes against targets aligned by index.
pub fn detection_report(
    pred_labels: &[usize],
    pred_boxes: &[BBox],
    true_labels: &[usize],
    true_boxes: &[Option<BBox>],
    classes: usize,
) -> Result<(DetectionReport, ConfusionMatrix)> {
    let n = true_labels.len();
    if pred_labels.len() != n || pred_boxes.len() != n || true_boxes.len() != n {
        return Err(Error::data(format!(
            "detection report inputs disagree in length: {} / {} / {} / {}",
            pred_labels.len(),
            pred_boxes.len(),
            n,
            true_boxes.len()
        )));
    }
    let cm = confusion_matrix(true_labels, pred_labels, classes)?;
    let classification = classification_report(&cm)?;
    let ious: Vec<f64> = pred_boxes.iter().zip(true_boxes).filter_map(|(p, t)| t.as_ref().map(|t| iou(p, t))).collect();
    let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    let report = DetectionReport {
        classification,
        mean_iou,
        iou_at_50: ious.iter().filter(|&&v| v >= 0.5).count(),
        boxed_samples: ious.len(),
    };
    Ok((report, cm))
}
