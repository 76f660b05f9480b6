use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{pct, MetricsError};
use crate::dataset::{AnnotationStore, CategoryId, ImageId};
use crate::geometry::{box_iou, BBox};

/// COCO-results entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    #[serde(with = "bbox_array")]
    pub bbox: BBox,
    pub score: f64,
}

mod bbox_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&b.to_array(), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox::new(x, y, w, h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub gt: usize,
    pub iou: f64,
}

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95, built from integers so that
/// e.g. the third entry is exactly `0.6`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Greedy matching for one image and class. `preds` must already be in
/// descending score order; each takes the still-unmatched GT of highest IoU
/// (lowest index on ties) if that IoU reaches `threshold`.
pub fn match_detections(preds: &[BBox], gts: &[BBox], threshold: f64) -> Vec<Option<Match>> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<Match> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = box_iou(p, gt);
                if iou >= threshold && best.is_none_or(|b| iou > b.iou) {
                    best = Some(Match { gt: g, iou });
                }
            }
            if let Some(m) = best {
                taken[m.gt] = true;
            }
            best
        })
        .collect()
}

/// Sort key: score descending, then original position.
fn by_score_desc(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// 101-point interpolated AP from `(score, is_tp)` flags pooled over a split.
/// Returns `None` when there is nothing to evaluate (no GT and no predictions).
pub fn average_precision(flags: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| by_score_desc((a, flags[a].0), (b, flags[b].0)));

    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for s in 0..=100 {
        let r = s as f64 / 100.0;
        let idx = recall.partition_point(|&rc| rc < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetMetrics {
    #[serde(rename = "mAP50")]
    pub map50: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

/// Per (image, category): `(prediction index, match)` pairs in score order.
pub type MatchTable = BTreeMap<(ImageId, CategoryId), Vec<(usize, Option<Match>)>>;

/// Full evaluation detail behind a [`DetMetrics`] row.
#[derive(Debug, Clone, PartialEq)]
pub struct DetEvalResult {
    pub metrics: DetMetrics,
    /// AP in `[0, 1]` per category id and threshold index; `None` = excluded.
    pub ap: BTreeMap<CategoryId, [Option<f64>; 10]>,
    /// Per image and category at IoU 0.5: `(prediction index, match)` in score order.
    pub matches: MatchTable,
    pub num_categories: usize,
}

/// mAP50, mAP over the ten-threshold ladder, and P/R/F1 at IoU 0.5 for predictions
/// scoring at least `conf_threshold`. Every image of `gt` is evaluated.
pub fn map_report(
    preds: &[PredictionRecord],
    gt: &AnnotationStore,
    conf_threshold: f64,
) -> Result<DetEvalResult, MetricsError> {
    let images: HashSet<ImageId> = gt.images.iter().map(|im| im.id).collect();
    let categories = gt.class_ids();
    let known: HashSet<CategoryId> = categories.iter().copied().collect();
    for p in preds {
        if !images.contains(&p.image_id) {
            return Err(MetricsError::UnknownImage(p.image_id));
        }
        if !known.contains(&p.category_id) {
            return Err(MetricsError::UnknownCategory(p.category_id));
        }
    }

    let mut gt_boxes: BTreeMap<(ImageId, CategoryId), Vec<BBox>> = BTreeMap::new();
    for inst in &gt.instances {
        if let Some(b) = inst.bbox {
            gt_boxes.entry((inst.image_id, inst.category_id)).or_default().push(b);
        }
    }
    let mut pred_idx: BTreeMap<(ImageId, CategoryId), Vec<usize>> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        pred_idx.entry((p.image_id, p.category_id)).or_default().push(i);
    }
    for list in pred_idx.values_mut() {
        list.sort_by(|&a, &b| by_score_desc((a, preds[a].score), (b, preds[b].score)));
    }
    let mut keys: Vec<(ImageId, CategoryId)> = gt_boxes.keys().chain(pred_idx.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();

    let thresholds = iou_thresholds();
    let mut ap = BTreeMap::new();
    let mut matches = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut any_conf_pred = false;

    for &cat in &categories {
        let mut per_t = [None; 10];
        let n_gt: usize = keys.iter().filter(|k| k.1 == cat).map(|k| gt_boxes.get(k).map_or(0, Vec::len)).sum();
        for (t, &thr) in thresholds.iter().enumerate() {
            let mut flags = Vec::new();
            for key in keys.iter().filter(|k| k.1 == cat) {
                let order = pred_idx.get(key).map(Vec::as_slice).unwrap_or(&[]);
                let gts = gt_boxes.get(key).map(Vec::as_slice).unwrap_or(&[]);
                let boxes: Vec<BBox> = order.iter().map(|&i| preds[i].bbox).collect();
                let m = match_detections(&boxes, gts, thr);
                flags.extend(order.iter().zip(&m).map(|(&i, mm)| (preds[i].score, mm.is_some())));
                if t == 0 {
                    // P/R/F1 operating point: confidence-filtered predictions at IoU 0.5
                    let kept: Vec<BBox> =
                        order.iter().filter(|&&i| preds[i].score >= conf_threshold).map(|&i| preds[i].bbox).collect();
                    let mc = match_detections(&kept, gts, thr);
                    let hits = mc.iter().filter(|x| x.is_some()).count();
                    any_conf_pred |= !kept.is_empty();
                    tp += hits;
                    fp += kept.len() - hits;
                    fn_ += gts.len() - hits;
                    matches.insert(*key, order.iter().copied().zip(m).collect());
                }
            }
            per_t[t] = average_precision(&flags, n_gt);
        }
        ap.insert(cat, per_t);
    }

    let mean_at = |t: usize| {
        let vals: Vec<f64> = ap.values().filter_map(|a| a[t]).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let nothing_to_score = ap.values().all(|a| a.iter().all(Option::is_none));
    let map50 = if nothing_to_score { 100.0 } else { 100.0 * mean_at(0).unwrap_or(0.0) };
    let map = if nothing_to_score {
        100.0
    } else {
        100.0 * (0..10).map(|t| mean_at(t).unwrap_or(0.0)).sum::<f64>() / 10.0
    };

    let all_empty = tp + fp + fn_ == 0 && !any_conf_pred;
    let precision = pct(tp as f64, (tp + fp) as f64, all_empty);
    let recall = pct(tp as f64, (tp + fn_) as f64, all_empty);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };

    Ok(DetEvalResult {
        metrics: DetMetrics { map50, map, precision, recall, f1 },
        ap,
        matches,
        num_categories: categories.len(),
    })
}
