//! Evaluation: pixel-level segmentation metrics and COCO-style detection mAP.
//!
//! All reported values are percentages. Ratios with a zero denominator are 0,
//! except when prediction and ground truth are both empty across the whole set,
//! which scores 100.

mod det;
mod seg;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageId;

pub use det::{
    average_precision, iou_thresholds, map_report, match_detections, DetEvalResult, DetMetrics, Match, MatchTable,
    PredictionRecord,
};
pub use seg::{seg_metrics, SegConfusion, SegMetrics};

pub use crate::geometry::box_iou;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("resolution mismatch for image {image}: prediction {pred:?} vs ground truth {gt:?}")]
    ResolutionMismatch { image: usize, pred: (usize, usize), gt: (usize, usize) },
    #[error("prediction and ground-truth sets differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("prediction references image {0} absent from ground truth")]
    UnknownImage(ImageId),
    #[error("prediction references unknown category {0}")]
    UnknownCategory(u64),
}

/// `num / den` as a percentage with the degenerate-case convention described at module level.
pub(crate) fn pct(num: f64, den: f64, all_empty: bool) -> f64 {
    if den > 0.0 {
        100.0 * num / den
    } else if all_empty {
        100.0
    } else {
        0.0
    }
}

/// One table row's worth of metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metrics {
    Seg(SegMetrics),
    Det(DetMetrics),
}

impl Metrics {
    /// `(column name, value)` pairs in table order.
    pub fn columns(&self) -> Vec<(&'static str, f64)> {
        match self {
            Metrics::Seg(m) => vec![("mIoU", m.miou), ("Dice", m.dice), ("P", m.precision), ("R", m.recall)],
            Metrics::Det(m) => vec![
                ("mAP50", m.map50),
                ("mAP", m.map),
                ("P", m.precision),
                ("R", m.recall),
                ("F1", m.f1),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    pub metrics: Metrics,
}
