//! Pixel-level binary change metrics with micro-averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BinaryGrid;

/// Pooled confusion counts; merging is associative and commutative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ChangeCounts {
    pub fn from_masks(pred: &BinaryGrid, truth: &BinaryGrid) -> Result<Self> {
        if pred.shape() != truth.shape() {
            return Err(Error::Dimension(format!(
                "prediction {:?} vs truth {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        let mut c = ChangeCounts::default();
        for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> BinaryChangeMetrics {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        BinaryChangeMetrics {
            f1,
            precision,
            recall,
            iou: ratio(self.tp, self.tp + self.fp + self.fn_),
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryChangeMetrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

pub fn compute_metrics(pred: &BinaryGrid, truth: &BinaryGrid) -> Result<BinaryChangeMetrics> {
    Ok(ChangeCounts::from_masks(pred, truth)?.metrics())
}

/// Micro-averaged metrics over many pairs.
pub fn compute_metrics_batch<'a>(
    pairs: impl IntoIterator<Item = (&'a BinaryGrid, &'a BinaryGrid)>,
) -> Result<BinaryChangeMetrics> {
    let mut acc = ChangeCounts::default();
    for (p, t) in pairs {
        acc = acc.merge(ChangeCounts::from_masks(p, t)?);
    }
    Ok(acc.metrics())
}

/// Reference F1 values a trained detector has to beat, derived from the
/// change prevalence of the evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaselines {
    pub prevalence: f64,
    /// Predicting change everywhere.
    pub all_ones_f1: f64,
    /// Bernoulli(prevalence) predictions: precision = recall = prevalence in expectation.
    pub prevalence_matched_f1: f64,
}

impl RandomBaselines {
    pub fn from_counts(counts: &ChangeCounts) -> Self {
        let total = counts.total();
        let positives = counts.tp + counts.fn_;
        let prevalence = if total == 0 { 0.0 } else { positives as f64 / total as f64 };
        let all_ones_f1 = if positives == 0 {
            0.0
        } else {
            2.0 * prevalence / (1.0 + prevalence)
        };
        Self {
            prevalence,
            all_ones_f1,
            prevalence_matched_f1: prevalence,
        }
    }
}
