//! Classification, box-regression and masked composite detection losses.
//!
//! Every loss returns the scalar value together with its gradient with
//! respect to the network output, laid out like that output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::tensor::{Scalar, Tensor};

/// Ground truth for one detection sample. Background images carry no box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionTarget {
    pub label: usize,
    pub bbox: Option<BBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CompositeLossCfg {
    /// Weight of the box term relative to cross-entropy.
    pub box_weight: f64,
    pub classes: usize,
}

impl CompositeLossCfg {
    pub fn new(classes: usize) -> Self {
        CompositeLossCfg { box_weight: 1.0, classes }
    }

    fn validate(&self) -> Result<()> {
        if self.box_weight.is_nan() || self.box_weight < 0.0 {
            return Err(Error::config(format!("box weight must be non-negative, got {}", self.box_weight)));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
/// `logits` is `(n, C, 1, 1)`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 || s.n != labels.len() {
        return Err(Error::shape("cross_entropy", format!("logits {s} do not match {} labels", labels.len())));
    }
    let c = s.c;
    let inv_n = T::one() / T::from_usize(s.n).unwrap();
    let mut grad = Tensor::zeros(s);
    let mut total = T::zero();
    for (i, (&label, (row, g))) in
        labels.iter().zip(logits.data().chunks(c).zip(grad.data_mut().chunks_mut(c))).enumerate()
    {
        if label >= c {
            return Err(Error::data(format!("label {label} of sample {i} is outside [0, {c})")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let lse = max + sum.ln();
        total = total + (lse - row[label]);
        for j in 0..c {
            let p = (row[j] - lse).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            g[j] = (p - onehot) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Mean squared error over the valid samples and their four coordinates.
/// With no valid sample the loss and gradient are zero.
pub fn bbox_mse<T: Scalar>(pred: &[[T; 4]], target: &[[T; 4]], valid: &[bool]) -> (T, Vec<[T; 4]>) {
    let count = valid.iter().filter(|&&v| v).count();
    let mut grad = vec![[T::zero(); 4]; pred.len()];
    if count == 0 {
        return (T::zero(), grad);
    }
    let denom = T::from_usize(4 * count).unwrap();
    let two = T::from_f64_lossy(2.0);
    let mut loss = T::zero();
    for ((p, t), (g, &ok)) in pred.iter().zip(target).zip(grad.iter_mut().zip(valid)) {
        if !ok {
            continue;
        }
        for k in 0..4 {
            let d = p[k] - t[k];
            loss = loss + d * d;
            g[k] = two * d / denom;
        }
    }
    (loss / denom, grad)
}

/// Cross-entropy on the first `C` outputs plus `box_weight` times the box
/// MSE on the last four, restricted to samples that carry a box.
pub fn composite_detection_loss<T: Scalar>(
    output: &Tensor<T>,
    targets: &[DetectionTarget],
    cfg: &CompositeLossCfg,
) -> Result<(T, Tensor<T>)> {
    cfg.validate()?;
    let s = output.shape();
    let c = cfg.classes;
    if s.c != c + 4 || s.h != 1 || s.w != 1 || s.n != targets.len() {
        return Err(Error::shape(
            "composite_detection_loss",
            format!("output {s} does not fit {} targets with {c} classes", targets.len()),
        ));
    }
    let width = c + 4;
    let mut class_logits = Vec::with_capacity(s.n * c);
    let mut pred = Vec::with_capacity(s.n);
    for row in output.data().chunks(width) {
        class_logits.extend_from_slice(&row[..c]);
        pred.push([row[c], row[c + 1], row[c + 2], row[c + 3]]);
    }
    let class_logits = Tensor::from_vec([s.n, c, 1, 1], class_logits)?;
    let labels: Vec<usize> = targets.iter().map(|t| t.label).collect();
    let (ce, ce_grad) = cross_entropy(&class_logits, &labels)?;

    let mut grad = Tensor::zeros(s);
    for (row, g) in grad.data_mut().chunks_mut(width).zip(ce_grad.data().chunks(c)) {
        row[..c].copy_from_slice(g);
    }
    let valid: Vec<bool> = targets.iter().map(|t| t.bbox.is_some()).collect();
    if !valid.iter().any(|&v| v) {
        return Ok((ce, grad));
    }
    let boxes: Vec<[T; 4]> = targets
        .iter()
        .map(|t| t.bbox.map(|b| b.coords().map(|v| T::from_f64_lossy(v as f64))).unwrap_or([T::zero(); 4]))
        .collect();
    let (mse, mse_grad) = bbox_mse(&pred, &boxes, &valid);
    let lambda = T::from_f64_lossy(cfg.box_weight);
    for (row, g) in grad.data_mut().chunks_mut(width).zip(&mse_grad) {
        for k in 0..4 {
            row[c + k] = lambda * g[k];
        }
    }
    Ok((ce + lambda * mse, grad))
}

/// Supervision for a batch, selecting the matching loss.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Detection { targets: Vec<DetectionTarget>, cfg: CompositeLossCfg },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Detection { targets, .. } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn loss<T: Scalar>(&self, output: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        match self {
            Targets::Labels(labels) => cross_entropy(output, labels),
            Targets::Detection { targets, cfg } => composite_detection_loss(output, targets, cfg),
        }
    }

    /// Targets for the given sample indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Detection { targets, cfg } => {
                Targets::Detection { targets: idx.iter().map(|&i| targets[i]).collect(), cfg: *cfg }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(n: usize, c: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([n, c, 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&logits(1, 2, &[0.3, 0.3]), &[1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, _) = cross_entropy(&logits(1, 2, &[1.0, 2.0]), &[1]).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        let (l, g) = cross_entropy(&logits(1, 2, &[1000.0, 0.0]), &[0]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let (_, g) = cross_entropy(&logits(2, 2, &[0.0, 0.0, 0.0, 0.0]), &[0, 1]).unwrap();
        assert_eq!(g.data(), &[-0.25, 0.25, 0.25, -0.25]);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let err = cross_entropy(&logits(2, 2, &[0.0; 4]), &[0, 2]).unwrap_err();
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    #[test]
    fn bbox_mse_examples() {
        let p = [[0.1, 0.2, 0.5, 0.6]];
        let (l, _) = bbox_mse(&p, &p, &[true]);
        assert_eq!(l, 0.0);
        let (l, g) = bbox_mse(&[[9.0; 4]], &[[0.0; 4]], &[false]);
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![[0.0; 4]]);
        let delta: f64 = 0.3;
        let (l, _) = bbox_mse(&[[0.5 + delta; 4]], &[[0.5; 4]], &[true]);
        assert!((l - delta * delta).abs() < 1e-12);
    }

    #[test]
    fn composite_background_only_equals_cross_entropy() {
        let out = logits(2, 6, &[0.2, -0.1, 0.7, 0.1, 0.4, 0.9, 1.0, 2.0, -3.0, 0.5, 0.5, 0.5]);
        let targets = [DetectionTarget { label: 0, bbox: None }, DetectionTarget { label: 1, bbox: None }];
        let cfg = CompositeLossCfg::new(2);
        let (l, g) = composite_detection_loss(&out, &targets, &cfg).unwrap();
        let cls = logits(2, 2, &[0.2, -0.1, 1.0, 2.0]);
        let (ce, _) = cross_entropy(&cls, &[0, 1]).unwrap();
        assert_eq!(l.to_bits(), ce.to_bits());
        assert_eq!(&g.data()[2..6], &[0.0; 4]);
    }

    #[test]
    fn composite_box_term_and_lambda_zero() {
        let bbox = BBox::new(0.1, 0.1, 0.5, 0.5);
        let delta = 0.2;
        let out = logits(1, 6, &[0.0, 60.0, 0.1 + delta, 0.1 + delta, 0.5 + delta, 0.5 + delta]);
        let targets = [DetectionTarget { label: 1, bbox: Some(bbox) }];
        let (l, _) = composite_detection_loss(&out, &targets, &CompositeLossCfg::new(2)).unwrap();
        assert!((l - delta * delta).abs() < 1e-6, "{l}");

        let cfg = CompositeLossCfg { box_weight: 0.0, classes: 2 };
        let (l, _) = composite_detection_loss(&out, &targets, &cfg).unwrap();
        let (ce, _) = cross_entropy(&logits(1, 2, &[0.0, 60.0]), &[1]).unwrap();
        assert_eq!(l, ce);

        let cfg = CompositeLossCfg { box_weight: -1.0, classes: 2 };
        assert!(composite_detection_loss(&out, &targets, &cfg).is_err());
    }
}
