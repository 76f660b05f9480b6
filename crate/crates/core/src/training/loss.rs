//! Detection and segmentation losses with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::decoders::{DenseMask, DetGrid, DetTargets};
use crate::mask::BinaryMask;
use crate::tensor::{sigmoid, Tensor3};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub obj: f64,
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub seg_bce: f64,
    pub seg_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { obj: 1.0, cls: 1.0, box_: 1.0, seg_bce: 1.0, seg_dice: 1.0 }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        [self.obj, self.cls, self.box_, self.seg_bce, self.seg_dice].iter().all(|w| w.is_finite() && *w >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetLoss {
    pub total: f64,
    pub obj: f64,
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_: f64,
}

/// Binary cross-entropy on a logit, and its derivative.
fn bce_logit(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Objectness BCE averaged over every patch; class BCE and smooth-L1 box terms
/// averaged over the positive patches (elementwise). Without positives the class
/// and box terms are zero. The gradient has the stacked `(1 + K + 4)` layout.
pub fn loss_detection(
    pred: &DetGrid,
    targets: &DetTargets,
    w: &LossWeights,
) -> Result<(DetLoss, Tensor3), TrainError> {
    let (gh, gw) = pred.grid();
    let k = pred.num_classes();
    if (gh, gw) != (targets.grid_h, targets.grid_w) || k != targets.num_classes {
        return Err(TrainError::Shape(format!(
            "prediction grid {gh}x{gw} (K={k}) vs targets {}x{} (K={})",
            targets.grid_h, targets.grid_w, targets.num_classes
        )));
    }
    let n = gh * gw;
    let npos = targets.positives();
    let mut grad = Tensor3::zeros(5 + k, gh, gw);
    let mut out = DetLoss::default();

    for p in 0..n {
        let y = if targets.is_positive(p) { 1.0 } else { 0.0 };
        let (l, g) = bce_logit(pred.objectness.data[p], y);
        out.obj += l / n as f64;
        grad.data[p] = w.obj * g / n as f64;
    }
    if npos > 0 {
        let cls_norm = (npos * k) as f64;
        let box_norm = (npos * 4) as f64;
        for p in (0..n).filter(|&p| targets.is_positive(p)) {
            for c in 0..k {
                let y = if targets.class[p] == c { 1.0 } else { 0.0 };
                let (l, g) = bce_logit(pred.class_scores.data[c * n + p], y);
                out.cls += l / cls_norm;
                grad.data[(1 + c) * n + p] = w.cls * g / cls_norm;
            }
            for c in 0..4 {
                let (l, g) = smooth_l1(pred.offsets.data[c * n + p] - targets.offsets[p][c]);
                out.box_ += l / box_norm;
                grad.data[(1 + k + c) * n + p] = w.box_ * g / box_norm;
            }
        }
    }
    out.total = w.obj * out.obj + w.cls * out.cls + w.box_ * out.box_;
    Ok((out, grad))
}

fn check_resolution(w: usize, h: usize, gt: &BinaryMask) -> Result<(), TrainError> {
    if (w, h) != (gt.width(), gt.height()) {
        return Err(TrainError::Shape(format!(
            "prediction {w}x{h} vs ground truth {}x{}",
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

const PROB_EPS: f64 = 1e-12;

/// Pixel BCE plus `1 - soft Dice` (with +1 smoothing) on a probability map.
pub fn loss_segmentation(pred: &DenseMask, gt: &BinaryMask, w: &LossWeights) -> Result<f64, TrainError> {
    check_resolution(pred.width, pred.height, gt)?;
    let n = pred.probs.len().max(1) as f64;
    let (mut bce, mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.probs.iter().zip(gt.as_slice()) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let y = if g { 1.0 } else { 0.0 };
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        inter += p * y;
        sp += p;
        sg += y;
    }
    let dice = (2.0 * inter + 1.0) / (sp + sg + 1.0);
    Ok(w.seg_bce * bce / n + w.seg_dice * (1.0 - dice))
}

/// Same loss evaluated on logits, with the gradient per logit.
pub fn loss_segmentation_logits(
    logits: &Tensor3,
    gt: &BinaryMask,
    w: &LossWeights,
) -> Result<(f64, Tensor3), TrainError> {
    check_resolution(logits.w, logits.h, gt)?;
    let n = logits.data.len().max(1) as f64;
    let probs: Vec<f64> = logits.data.iter().map(|&z| sigmoid(z)).collect();
    let ys: Vec<f64> = gt.as_slice().iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let mut bce = 0.0;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for ((&z, &p), &y) in logits.data.iter().zip(&probs).zip(&ys) {
        bce += bce_logit(z, y).0;
        inter += p * y;
        sp += p;
        sg += y;
    }
    let num = 2.0 * inter + 1.0;
    let den = sp + sg + 1.0;
    let loss = w.seg_bce * bce / n + w.seg_dice * (1.0 - num / den);

    let mut grad = Tensor3::zeros(logits.c, logits.h, logits.w);
    for (i, (&p, &y)) in probs.iter().zip(&ys).enumerate() {
        let d_dice_dp = (2.0 * y * den - num) / (den * den);
        grad.data[i] = w.seg_bce * (p - y) / n - w.seg_dice * d_dice_dp * p * (1.0 - p);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::{encode_targets, GtBox};
    use crate::geometry::BBox;

    #[test]
    fn bce_logit_matches_direct_formula() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-7.5, 1.0)] {
            let p = 1.0 / (1.0 + f64::exp(-z));
            let direct = -(y * f64::ln(p) + (1.0 - y) * f64::ln(1.0 - p));
            assert!((bce_logit(z, y).0 - direct).abs() < 1e-12);
        }
    }

    fn perfect_grid(t: &DetTargets) -> DetGrid {
        let n = t.grid_h * t.grid_w;
        let mut raw = Tensor3::zeros(5 + t.num_classes, t.grid_h, t.grid_w);
        for p in 0..n {
            let pos = t.is_positive(p);
            raw.data[p] = if pos { 40.0 } else { -40.0 };
            for c in 0..t.num_classes {
                raw.data[(1 + c) * n + p] = if pos && t.class[p] == c { 40.0 } else { -40.0 };
            }
            for c in 0..4 {
                raw.data[(1 + t.num_classes + c) * n + p] = t.offsets[p][c];
            }
        }
        DetGrid::from_raw(&raw, t.num_classes)
    }

    #[test]
    fn perfect_detection_has_near_zero_loss() {
        let gts = [
            GtBox { instance_id: 1, bbox: BBox::new(3.0, 5.0, 20.0, 11.0), class: 0 },
            GtBox { instance_id: 2, bbox: BBox::new(40.0, 30.0, 9.0, 30.0), class: 1 },
        ];
        let t = encode_targets(&gts, 4, 5, 2).unwrap();
        let (l, _) = loss_detection(&perfect_grid(&t), &t, &LossWeights::default()).unwrap();
        assert!(l.total < 1e-6, "{l:?}");
    }

    #[test]
    fn no_positives_is_objectness_only() {
        let t = encode_targets(&[], 3, 3, 1).unwrap();
        let raw = Tensor3::filled(6, 3, 3, 0.7);
        let (l, g) = loss_detection(&DetGrid::from_raw(&raw, 1), &t, &LossWeights::default()).unwrap();
        assert!(l.total.is_finite());
        assert_eq!((l.cls, l.box_), (0.0, 0.0));
        assert!((l.total - bce_logit(0.7, 0.0).0).abs() < 1e-12);
        assert!(g.data[9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn detection_shape_mismatch() {
        let t = encode_targets(&[], 3, 3, 1).unwrap();
        let raw = Tensor3::zeros(6, 3, 4);
        assert!(loss_detection(&DetGrid::from_raw(&raw, 1), &t, &LossWeights::default()).is_err());
    }

    #[test]
    fn perfect_and_empty_segmentation() {
        let w = LossWeights::default();
        let gt = BinaryMask::from_fn(6, 4, |x, y| x > y);
        let probs = gt.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let pred = DenseMask { image_id: 0, width: 6, height: 4, probs };
        assert!(loss_segmentation(&pred, &gt, &w).unwrap() < 1e-6);
        let empty = BinaryMask::new(6, 4);
        assert!(loss_segmentation(&DenseMask::filled(0, 6, 4, 0.0), &empty, &w).unwrap() < 1e-6);
        assert!(loss_segmentation(&DenseMask::filled(0, 5, 4, 0.0), &empty, &w).is_err());
    }

    #[test]
    fn logit_and_probability_forms_agree() {
        let gt = BinaryMask::from_fn(5, 3, |x, y| (x + 2 * y) % 3 == 0);
        let logits = Tensor3::from_vec(1, 3, 5, (0..15).map(|i| (i as f64 * 0.37).sin() * 3.0).collect());
        let w = LossWeights { seg_bce: 0.7, seg_dice: 1.3, ..Default::default() };
        let (a, _) = loss_segmentation_logits(&logits, &gt, &w).unwrap();
        let b = loss_segmentation(&DenseMask::from_logits(&logits, 0), &gt, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn logit_gradients_match_differences() {
        let gt = BinaryMask::from_fn(4, 4, |x, y| x + y < 4);
        let logits = Tensor3::from_vec(1, 4, 4, (0..16).map(|i| (i as f64 * 1.3).cos() * 2.0).collect());
        let w = LossWeights::default();
        let (_, g) = loss_segmentation_logits(&logits, &gt, &w).unwrap();
        let h = 1e-6;
        for i in 0..16 {
            let mut up = logits.clone();
            up.data[i] += h;
            let mut dn = logits.clone();
            dn.data[i] -= h;
            let fd = (loss_segmentation_logits(&up, &gt, &w).unwrap().0
                - loss_segmentation_logits(&dn, &gt, &w).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g.data[i]);
        }
    }
}
