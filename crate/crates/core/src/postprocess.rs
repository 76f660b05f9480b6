//! Turning raw head outputs into final predictions: confidence filtering,
//! class-wise greedy NMS, a per-image cap and mask thresholding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CategoryId, ImageRecord};
use crate::decoders::{decode_boxes, DecoderError, DenseMask, DetGrid, Detection, PatchModel};
use crate::encoder::PatchFeatureMap;
use crate::geometry::box_iou;
use crate::mask::BinaryMask;
use crate::metrics::PredictionRecord;

#[derive(Debug, Error, PartialEq)]
pub enum PostprocessError {
    #[error("invalid postprocess config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub conf: f64,
    pub nms: f64,
    pub max_det: usize,
    pub mask: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { conf: 0.25, nms: 0.5, max_det: 300, mask: 0.5 }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        let bad = |m: &str| Err(PostprocessError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.conf) {
            return bad("confidence threshold must lie in [0, 1]");
        }
        if !(self.nms > 0.0 && self.nms < 1.0) {
            return bad("NMS threshold must lie in (0, 1)");
        }
        if self.max_det == 0 {
            return bad("max detections must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mask) {
            return bad("mask threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Order of visiting: score descending, then original index.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy suppression over an arbitrary pairwise overlap. Returns kept indices in
/// visiting order. Only pairs with equal class can suppress each other.
pub(crate) fn greedy_suppress(
    scores: &[f64],
    classes: &[usize],
    threshold: f64,
    overlap: impl Fn(usize, usize) -> f64,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| classes[k] != classes[i] || overlap(k, i) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Class-wise NMS. Output is ordered by descending score.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let classes: Vec<usize> = dets.iter().map(|d| d.class).collect();
    greedy_suppress(&scores, &classes, threshold, |a, b| box_iou(&dets[a].bbox, &dets[b].bbox))
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Decode, drop low-confidence and degenerate boxes, suppress, cap.
pub fn postprocess(grid: &DetGrid, cfg: &PostprocessConfig) -> Vec<Detection> {
    let candidates: Vec<Detection> = decode_boxes(grid)
        .into_iter()
        .filter(|d| d.score >= cfg.conf && d.bbox.is_valid())
        .collect();
    let ordered: Vec<Detection> = score_order(&candidates).into_iter().map(|i| candidates[i]).collect();
    let mut kept = nms(&ordered, cfg.nms);
    kept.truncate(cfg.max_det);
    kept
}

pub fn binarize(mask: &DenseMask, threshold: f64) -> BinaryMask {
    mask.binarize(threshold)
}

/// Final detections for one image in preprocessed pixel coordinates.
pub fn predict_detections(
    model: &PatchModel,
    map: &PatchFeatureMap,
    cfg: &PostprocessConfig,
) -> Result<Vec<Detection>, DecoderError> {
    let (grid, _) = model.forward_det(&map.to_tensor())?;
    grid.validate()?;
    Ok(postprocess(&grid, cfg))
}

/// Probability map at preprocessed resolution.
pub fn predict_mask(model: &PatchModel, map: &PatchFeatureMap) -> Result<DenseMask, DecoderError> {
    let (logits, _) = model.forward_seg(&map.to_tensor())?;
    Ok(DenseMask::from_logits(&logits, map.image_id))
}

/// Map detections back to the original image frame as result records.
/// `class_ids` is the sorted category list the head was trained with.
pub fn to_records(
    dets: &[Detection],
    map: &PatchFeatureMap,
    image: &ImageRecord,
    class_ids: &[CategoryId],
) -> Vec<PredictionRecord> {
    let sx = image.width as f64 / map.image_w as f64;
    let sy = image.height as f64 / map.image_h as f64;
    dets.iter()
        .map(|d| PredictionRecord {
            image_id: image.id,
            category_id: class_ids[d.class],
            bbox: d.bbox.scale(sx, sy).clip(image.width as f64, image.height as f64),
            score: d.score,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::tensor::Tensor3;
    use proptest::prelude::*;

    fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection { bbox: BBox::new(x, y, w, h), score, class: 0 }
    }

    #[test]
    fn identical_boxes_keep_best() {
        let kept = nms(&[det(0.0, 0.0, 10.0, 10.0, 0.8), det(0.0, 0.0, 10.0, 10.0, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn disjoint_boxes_survive() {
        let kept = nms(&[det(0.0, 0.0, 10.0, 10.0, 0.8), det(20.0, 0.0, 10.0, 10.0, 0.9)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn chain_suppression_keeps_a_and_c() {
        // A > B > C ; IoU(A,B)=0.6, IoU(A,C)=0.2, IoU(B,C)=0.7.
        // A kept; B removed by A; C only compared with A -> kept.
        let iou = [[1.0, 0.6, 0.2], [0.6, 1.0, 0.7], [0.2, 0.7, 1.0]];
        let kept = greedy_suppress(&[0.9, 0.8, 0.7], &[0, 0, 0], 0.5, |a, b| iou[a][b]);
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn classes_do_not_suppress_each_other() {
        let mut b = det(0.0, 0.0, 10.0, 10.0, 0.8);
        b.class = 1;
        assert_eq!(nms(&[det(0.0, 0.0, 10.0, 10.0, 0.9), b], 0.5).len(), 2);
    }

    #[test]
    fn equal_scores_break_ties_by_index() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.5);
        let b = det(1.0, 0.0, 10.0, 10.0, 0.5);
        assert_eq!(nms(&[a, b], 0.5), vec![a]);
        assert_eq!(nms(&[b, a], 0.5), vec![b]);
    }

    fn grid(gh: usize, gw: usize, hot: &[(usize, usize, f64)]) -> DetGrid {
        let mut raw = Tensor3::zeros(6, gh, gw);
        raw.plane_mut(0).fill(-20.0);
        raw.plane_mut(1).fill(20.0);
        for &(i, j, logit) in hot {
            *raw.at_mut(0, i, j) = logit;
        }
        DetGrid::from_raw(&raw, 1)
    }

    #[test]
    fn low_objectness_gives_nothing() {
        assert!(postprocess(&grid(4, 4, &[]), &PostprocessConfig::default()).is_empty());
    }

    #[test]
    fn two_separated_hot_patches() {
        let out = postprocess(&grid(6, 6, &[(1, 1, 5.0), (4, 4, 4.0)]), &PostprocessConfig::default());
        assert_eq!(out.len(), 2);
        assert!(out[0].score > out[1].score);
        assert_eq!(out[0].bbox, BBox::new(16.0, 16.0, 16.0, 16.0));
        assert_eq!(out[1].bbox, BBox::new(64.0, 64.0, 16.0, 16.0));
    }

    #[test]
    fn cap_keeps_top_scores() {
        // 25×20 grid of non-overlapping patch boxes, all distinct scores
        let (gh, gw) = (25, 20);
        let hot: Vec<_> = (0..gh * gw).map(|p| (p / gw, p % gw, p as f64 / 100.0)).collect();
        let g = grid(gh, gw, &hot);
        let cfg = PostprocessConfig { conf: 0.0, ..Default::default() };
        let out = postprocess(&g, &cfg);
        assert_eq!(out.len(), 300);
        let mut all: Vec<f64> = decode_boxes(&g).iter().map(|d| d.score).collect();
        all.sort_by(|a, b| b.total_cmp(a));
        let got: Vec<f64> = out.iter().map(|d| d.score).collect();
        assert_eq!(got, all[..300].to_vec());
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&DenseMask::filled(0, 3, 2, 0.9), 0.5).count(), 6);
        assert_eq!(binarize(&DenseMask::filled(0, 3, 2, 0.1), 0.5).count(), 0);
        let mut m = DenseMask::filled(0, 4, 4, 0.4);
        for y in 0..4 {
            for x in 0..4 {
                if (x + y) % 2 == 0 {
                    m.probs[y * 4 + x] = 0.6;
                }
            }
        }
        assert_eq!(binarize(&m, 0.5), BinaryMask::from_fn(4, 4, |x, y| (x + y) % 2 == 0));
    }

    #[test]
    fn config_validation() {
        assert!(PostprocessConfig::default().validate().is_ok());
        assert!(PostprocessConfig { nms: 1.0, ..Default::default() }.validate().is_err());
        assert!(PostprocessConfig { max_det: 0, ..Default::default() }.validate().is_err());
        assert!(PostprocessConfig { conf: 1.5, ..Default::default() }.validate().is_err());
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0.0..80.0f64, 0.0..80.0f64, 1.0..40.0f64, 1.0..40.0f64, 0.0..1.0f64, 0..2usize).prop_map(
                |(x, y, w, h, score, class)| Detection { bbox: BBox::new(x, y, w, h), score, class },
            ),
            0..40,
        )
    }

    proptest! {
        #[test]
        fn nms_is_idempotent(dets in arb_dets(), t in 0.1..0.9f64) {
            let once = nms(&dets, t);
            prop_assert_eq!(nms(&once, t), once);
        }

        #[test]
        fn kept_pairs_respect_threshold(dets in arb_dets(), t in 0.1..0.9f64) {
            let kept = nms(&dets, t);
            for (a, da) in kept.iter().enumerate() {
                for db in &kept[a + 1..] {
                    if da.class == db.class {
                        prop_assert!(box_iou(&da.bbox, &db.bbox) <= t);
                    }
                }
            }
        }

        #[test]
        fn raising_conf_never_adds(
            logits in prop::collection::vec(-4.0..4.0f64, 36),
            offs in prop::collection::vec(-0.8..0.8f64, 4 * 36),
            lo in 0.0..0.5f64,
            step in 0.0..0.5f64,
        ) {
            let mut raw = Tensor3::zeros(6, 6, 6);
            raw.plane_mut(0).copy_from_slice(&logits);
            raw.data[2 * 36..].copy_from_slice(&offs);
            let g = DetGrid::from_raw(&raw, 1);
            let a = postprocess(&g, &PostprocessConfig { conf: lo, max_det: 5, ..Default::default() });
            let b = postprocess(&g, &PostprocessConfig { conf: lo + step, max_det: 5, ..Default::default() });
            prop_assert!(b.len() <= a.len());
            prop_assert_eq!(&a, &postprocess(&g, &PostprocessConfig { conf: lo, max_det: 5, ..Default::default() }));
        }
    }
}
