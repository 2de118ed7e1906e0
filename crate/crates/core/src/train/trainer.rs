//! Mini-batch training and evaluation.

use std::time::Instant;

use serde::Serialize;

use super::losses::Targets;
use super::optim::OptimState;
use crate::data::Rng;
use crate::error::{Error, Result};
use crate::layers::{ArchGraph, Mode, OutputSpec};
use crate::metrics::{self, BBox, ClassMetrics, ConfusionMatrix};
use crate::tensor::{Shape, Tensor};

/// Stream offsets for per-epoch generators derived from the run seed.
const SHUFFLE_STREAM: u64 = 1 << 32;
const DROPOUT_STREAM: u64 = 2 << 32;

/// Images `(n, c, h, w)` with aligned supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub targets: Targets,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, targets: Targets, class_names: Vec<String>) -> Result<Self> {
        if images.shape().n != targets.len() {
            return Err(Error::data(format!("{} images but {} targets", images.shape().n, targets.len())));
        }
        Ok(Dataset { images, targets, class_names })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn sample_shape(&self) -> Shape {
        let s = self.images.shape();
        Shape::new(1, s.c, s.h, s.w)
    }

    /// Gathers the samples at `idx` into one batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Targets) {
        let s = self.images.shape();
        let per = s.sample_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(self.images.sample(i));
        }
        let images = Tensor::from_vec([idx.len(), s.c, s.h, s.w], data).expect("sizes agree");
        (images, self.targets.select(idx))
    }

    fn check_against(&self, graph: &ArchGraph) -> Result<()> {
        let want = graph.input_spec().batch_shape(1);
        let got = self.sample_shape();
        if want != got {
            return Err(Error::data(format!("batch 0: samples are {got} but the model expects {want}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { batch_size: 16, seed: 0, shuffle: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
    pub samples_per_sec: f64,
}

/// Runs one pass over `data`: forward, loss, backward and an optimizer step
/// per batch, with batch norm in train mode and dropout active.
///
/// The visiting order and dropout masks depend only on `(opts.seed, epoch)`.
pub fn train_epoch(
    graph: &mut ArchGraph,
    data: &Dataset,
    optim: &mut OptimState,
    opts: &TrainOptions,
    epoch: usize,
) -> Result<EpochStats> {
    if opts.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if data.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    data.check_against(graph)?;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.len()).collect();
    if opts.shuffle {
        Rng::with_stream(opts.seed, SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);
    }
    let mut dropout_rng = Rng::with_stream(opts.seed, DROPOUT_STREAM + epoch as u64);
    let mut total = 0.0;
    for (b, idx) in order.chunks(opts.batch_size).enumerate() {
        let (x, t) = data.batch(idx);
        let out = graph.forward(&x, Mode::Train, Some(&mut dropout_rng)).map_err(|e| at_batch(b, e))?;
        let (loss, grad) = t.loss(&out).map_err(|e| at_batch(b, e))?;
        if !loss.is_finite() {
            return Err(Error::data(format!("batch {b}: loss is not finite")));
        }
        total += loss as f64 * idx.len() as f64;
        let grads = graph.backward(&grad)?;
        optim.step(graph.params_mut(), &grads.params)?;
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(EpochStats {
        epoch,
        mean_loss: total / data.len() as f64,
        wall_seconds: wall,
        samples_per_sec: if wall > 0.0 { data.len() as f64 / wall } else { 0.0 },
    })
}

fn at_batch(b: usize, e: Error) -> Error {
    match e {
        Error::Data(msg) => Error::Data(format!("batch {b}: {msg}")),
        Error::Shape { layer, detail } => Error::Data(format!("batch {b}: {layer}: {detail}")),
        other => other,
    }
}

/// Inference-mode outputs over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_loss: f64,
    pub predictions: Vec<usize>,
    /// Predicted boxes, for detection models only.
    pub boxes: Option<Vec<BBox>>,
}

pub fn evaluate(graph: &mut ArchGraph, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    data.check_against(graph)?;
    let classes =
        graph.output_spec().classes().ok_or_else(|| Error::config("evaluation needs a classifier or detector"))?;
    let detector = matches!(graph.output_spec(), OutputSpec::Detection { .. });
    let width = graph.output_spec().channels();
    let mut predictions = Vec::with_capacity(data.len());
    let mut boxes = Vec::new();
    let mut total = 0.0;
    let order: Vec<usize> = (0..data.len()).collect();
    for (b, idx) in order.chunks(batch_size).enumerate() {
        let (x, t) = data.batch(idx);
        let out = graph.forward(&x, Mode::Infer, None).map_err(|e| at_batch(b, e))?;
        let (loss, _) = t.loss(&out).map_err(|e| at_batch(b, e))?;
        total += loss as f64 * idx.len() as f64;
        for row in out.data().chunks(width) {
            predictions.push(argmax(&row[..classes]));
            if detector {
                let r = &row[classes..];
                boxes.push(BBox::new(r[0], r[1], r[2], r[3]));
            }
        }
    }
    Ok(Evaluation {
        mean_loss: if data.is_empty() { 0.0 } else { total / data.len() as f64 },
        predictions,
        boxes: detector.then_some(boxes),
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    pub iou_at_50: usize,
    pub boxed_samples: usize,
}

/// Metrics document produced by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion_matrix: ConfusionMatrix,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionSummary>,
}

impl Evaluation {
    pub fn report(&self, data: &Dataset) -> Result<EvalReport> {
        let classes = data.classes();
        let (classification, cm, detection) = match (&data.targets, &self.boxes) {
            (Targets::Labels(labels), _) => {
                let cm = metrics::confusion_matrix(labels, &self.predictions, classes)?;
                (metrics::classification_report(&cm)?, cm, None)
            }
            (Targets::Detection { targets, .. }, Some(boxes)) => {
                let labels: Vec<usize> = targets.iter().map(|t| t.label).collect();
                let truth: Vec<Option<BBox>> = targets.iter().map(|t| t.bbox).collect();
                let (r, cm) = metrics::detection_report(&self.predictions, boxes, &labels, &truth, classes)?;
                let summary =
                    DetectionSummary { mean_iou: r.mean_iou, iou_at_50: r.iou_at_50, boxed_samples: r.boxed_samples };
                (r.classification, cm, Some(summary))
            }
            (Targets::Detection { .. }, None) => {
                return Err(Error::config("detection targets need a detection model"));
            }
        };
        let cm = cm.with_labels(data.class_names.clone())?;
        Ok(EvalReport {
            samples: data.len(),
            loss: self.mean_loss,
            accuracy: classification.accuracy,
            precision: classification.precision,
            recall: classification.recall,
            f1: classification.f1,
            per_class: classification.per_class,
            confusion_matrix: cm,
            detection,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{GraphBuilder, InputSpec};
    use crate::train::optim::OptimKind;

    fn toy() -> (ArchGraph, Dataset) {
        let mut b = GraphBuilder::new("toy", InputSpec::new(2, 2, 2), 3);
        let x = b.input();
        let h = b.global_avg_pool("gap", x).unwrap();
        let h = b.fully_connected("fc", h, 2, true).unwrap();
        b.softmax("softmax", h).unwrap();
        let g = b.finish(OutputSpec::Classes { classes: 2 }).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let label = i % 2;
            let v = if label == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
            for c in v {
                data.extend([c; 4]);
            }
            labels.push(label);
        }
        let images = Tensor::from_vec([20, 2, 2, 2], data).unwrap();
        let ds = Dataset::new(images, Targets::Labels(labels), vec!["a".into(), "b".into()]).unwrap();
        (g, ds)
    }

    #[test]
    fn loss_decreases_and_accuracy_reaches_one() {
        let (mut g, ds) = toy();
        let mut opt = OptimState::new(OptimKind::sgd(), 0.5).unwrap();
        let opts = TrainOptions { batch_size: 4, seed: 1, shuffle: true };
        let first = train_epoch(&mut g, &ds, &mut opt, &opts, 0).unwrap();
        let mut last = first.clone();
        for e in 1..20 {
            last = train_epoch(&mut g, &ds, &mut opt, &opts, e).unwrap();
        }
        assert!(last.mean_loss < 0.5 * first.mean_loss);
        let report = evaluate(&mut g, &ds, 8).unwrap().report(&ds).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.confusion_matrix.total(), 20);
    }

    #[test]
    fn zero_learning_rate_keeps_params_and_matches_eval_loss() {
        let (mut g, ds) = toy();
        let before = g.params().clone();
        let mut opt = OptimState::new(OptimKind::adam(), 0.0).unwrap();
        let stats = train_epoch(&mut g, &ds, &mut opt, &TrainOptions::default(), 0).unwrap();
        for (name, e) in before.iter() {
            assert_eq!(e.tensor, *g.params().get(name).unwrap());
        }
        let eval = evaluate(&mut g, &ds, 7).unwrap();
        assert!((stats.mean_loss - eval.mean_loss).abs() < 1e-6);
    }

    #[test]
    fn wrong_input_shape_names_batch() {
        let (mut g, _) = toy();
        let images = Tensor::zeros([2, 3, 2, 2]);
        let ds = Dataset::new(images, Targets::Labels(vec![0, 1]), vec!["a".into(), "b".into()]).unwrap();
        let mut opt = OptimState::new(OptimKind::sgd(), 0.1).unwrap();
        let err = train_epoch(&mut g, &ds, &mut opt, &TrainOptions::default(), 0).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("batch 0")), "{err}");
    }
}
