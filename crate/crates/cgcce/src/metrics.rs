//! Binary cross-entropy loss and the segmentation evaluation suite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::ConfusionCounts;

/// Predictions are clamped to `[EPS, 1-EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// F1/IoU/precision/recall plus the counts they derive from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "split,f1,iou,precision,recall,tp,fp,fn,tn";

    pub fn csv_row(&self, split: &str) -> String {
        format!(
            "{split},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.f1, self.iou, self.precision, self.recall,
            self.counts.tp, self.counts.fp, self.counts.fn_, self.counts.tn
        )
    }
}

/// Mean binary cross-entropy between probabilities and binary targets.
pub fn bce_loss(pred_prob: &Tensor, target: &Tensor) -> Result<f64> {
    if pred_prob.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "bce shapes differ: {:?} vs {:?}",
            pred_prob.shape(),
            target.shape()
        )));
    }
    let n = pred_prob.numel();
    let mut acc = 0.0;
    for (&p, &y) in pred_prob.data().iter().zip(target.data()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(acc / n as f64)
}

/// Pixel confusion counts between two binary arrays.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "confusion lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 1 || g > 1 {
            return Err(Error::Data(format!("non-binary value in confusion input: {p}/{g}")));
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Derive the metric suite from confusion counts.
///
/// Zero-denominator convention: with no positives anywhere
/// (tp+fp+fn = 0) every metric is 1.0 — an all-negative tile predicted
/// all-negative scores perfectly. Otherwise an individual zero
/// denominator yields 0.0 for that metric.
pub fn metrics(c: &ConfusionCounts) -> MetricReport {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    if c.tp + c.fp + c.fn_ == 0 {
        return MetricReport { f1: 1.0, iou: 1.0, precision: 1.0, recall: 1.0, counts: *c };
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    MetricReport {
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        counts: *c,
    }
}
