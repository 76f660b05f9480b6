use serde::{Deserialize, Serialize};

use super::{pct, MetricsError};
use crate::mask::BinaryMask;

/// Per-class pixel counts accumulated over a split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegConfusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl SegConfusion {
    pub fn new(classes: usize) -> Self {
        Self { tp: vec![0; classes], fp: vec![0; classes], fn_: vec![0; classes] }
    }

    pub fn single(tp: u64, fp: u64, fn_: u64) -> Self {
        Self { tp: vec![tp], fp: vec![fp], fn_: vec![fn_] }
    }

    /// Accumulate one binary (single foreground class) mask pair.
    pub fn add_binary(&mut self, pred: &BinaryMask, gt: &BinaryMask) {
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            match (p, g) {
                (true, true) => self.tp[0] += 1,
                (true, false) => self.fp[0] += 1,
                (false, true) => self.fn_[0] += 1,
                (false, false) => {}
            }
        }
    }

    /// Mean IoU, Dice, precision and recall in percent. Dice, P and R use counts
    /// summed over classes; mIoU averages the per-class ratios.
    pub fn metrics(&self) -> SegMetrics {
        let k = self.tp.len();
        let (tp, fp, fn_) = (
            self.tp.iter().sum::<u64>() as f64,
            self.fp.iter().sum::<u64>() as f64,
            self.fn_.iter().sum::<u64>() as f64,
        );
        let all_empty = tp + fp + fn_ == 0.0;
        let miou = if k == 0 {
            0.0
        } else {
            (0..k)
                .map(|c| {
                    let (t, f, n) = (self.tp[c] as f64, self.fp[c] as f64, self.fn_[c] as f64);
                    pct(t, t + f + n, all_empty)
                })
                .sum::<f64>()
                / k as f64
        };
        SegMetrics {
            miou,
            dice: pct(2.0 * tp, 2.0 * tp + fp + fn_, all_empty),
            precision: pct(tp, tp + fp, all_empty),
            recall: pct(tp, tp + fn_, all_empty),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "Dice")]
    pub dice: f64,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
}

/// Micro-averaged pixel metrics over aligned binary prediction/GT pairs.
pub fn seg_metrics(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<SegMetrics, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), gts.len()));
    }
    let mut conf = SegConfusion::new(1);
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if (p.width(), p.height()) != (g.width(), g.height()) {
            return Err(MetricsError::ResolutionMismatch {
                image: i,
                pred: (p.width(), p.height()),
                gt: (g.width(), g.height()),
            });
        }
        conf.add_binary(p, g);
    }
    Ok(conf.metrics())
}
