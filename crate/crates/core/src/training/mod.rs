//! Head training on cached features: losses, Adam, batch assembly, flip
//! augmentation, per-epoch validation and best-checkpoint selection.

mod loss;
mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnnotationStore, ImageId};
use crate::decoders::{encode_targets, DecoderError, DetTargets, GtBox, HeadConfig, ModelConfig, PatchModel, Task};
use crate::encoder::{EncoderError, FeatureArchive, PatchFeatureMap};
use crate::mask::BinaryMask;
use crate::metrics::{map_report, seg_metrics, Metrics, MetricsError, PredictionRecord};
use crate::postprocess::{predict_detections, predict_mask, to_records, PostprocessConfig};
use crate::tensor::Tensor3;

pub use loss::{loss_detection, loss_segmentation, loss_segmentation_logits, DetLoss, LossWeights};
pub use optim::Adam;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no cached features for annotated image {0}")]
    MissingFeatures(ImageId),
    #[error("no flipped feature entry for image {0}; re-extract with flipped copies")]
    MissingFlipped(ImageId),
    #[error("image {0} is not in the annotation store")]
    UnknownImage(ImageId),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("loss curve: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub flip: bool,
    pub weights: LossWeights,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Used for the per-epoch detection validation.
    pub postprocess: PostprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            flip: false,
            weights: LossWeights::default(),
            max_steps: None,
            postprocess: PostprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !self.weights.is_valid() {
            return bad("loss weights must be non-negative");
        }
        self.postprocess.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, or the last epoch without validation.
    pub best: PatchModel,
    pub last: PatchModel,
    pub best_epoch: usize,
    pub steps: usize,
    pub curve: Vec<EpochRecord>,
}

/// Scale from the original image frame to the preprocessed (patch-aligned) frame.
fn frame_scale(store: &AnnotationStore, map: &PatchFeatureMap) -> Result<(f64, f64), TrainError> {
    let im = store.image(map.image_id).ok_or(TrainError::UnknownImage(map.image_id))?;
    Ok((map.image_w as f64 / im.width as f64, map.image_h as f64 / im.height as f64))
}

/// Ground-truth boxes of one image in the preprocessed frame. Instances without a
/// box fall back to their mask extent; boxes that vanish after scaling are skipped.
pub fn gt_boxes(store: &AnnotationStore, map: &PatchFeatureMap) -> Result<Vec<GtBox>, TrainError> {
    let (sx, sy) = frame_scale(store, map)?;
    let im = store.image(map.image_id).ok_or(TrainError::UnknownImage(map.image_id))?;
    let class_ids = store.class_ids();
    let mut out = Vec::new();
    for inst in store.instances_for(map.image_id) {
        let bbox = inst.bbox.or_else(|| {
            inst.mask.as_ref()?.rasterize(im.width as usize, im.height as usize)?.tight_bbox()
        });
        let Some(b) = bbox else { continue };
        let b = b.scale(sx, sy).clip(map.image_w as f64, map.image_h as f64);
        if !b.is_valid() {
            continue;
        }
        let class = class_ids.binary_search(&inst.category_id).map_err(|_| {
            TrainError::Metrics(MetricsError::UnknownCategory(inst.category_id))
        })?;
        out.push(GtBox { instance_id: inst.id, bbox: b, class });
    }
    Ok(out)
}

/// Foreground mask of one image resampled to the preprocessed frame.
pub fn gt_mask(store: &AnnotationStore, map: &PatchFeatureMap) -> Result<BinaryMask, TrainError> {
    let m = store.foreground_mask(map.image_id).ok_or(TrainError::UnknownImage(map.image_id))?;
    Ok(m.resize_nearest(map.image_w, map.image_h))
}

enum Target {
    Seg(BinaryMask),
    Det(DetTargets),
}

struct View {
    features: Tensor3,
    target: Target,
}

struct Sample {
    grid: (usize, usize),
    original: View,
    flipped: Option<View>,
}

fn build_view(map: &PatchFeatureMap, store: &AnnotationStore, task: Task, k: usize, flip: bool) -> Result<View, TrainError> {
    let target = match task {
        Task::Seg => {
            let m = gt_mask(store, map)?;
            Target::Seg(if flip { m.hflip() } else { m })
        }
        Task::Det => {
            let mut boxes = gt_boxes(store, map)?;
            if flip {
                for b in &mut boxes {
                    b.bbox = b.bbox.hflip(map.image_w as f64);
                }
            }
            Target::Det(encode_targets(&boxes, map.grid_h, map.grid_w, k)?)
        }
    };
    Ok(View { features: map.to_tensor(), target })
}

fn build_samples(
    archive: &FeatureArchive,
    store: &AnnotationStore,
    task: Task,
    flip: bool,
) -> Result<Vec<Sample>, TrainError> {
    let k = store.categories.len();
    let mut ids: Vec<ImageId> = store.images.iter().map(|im| im.id).collect();
    ids.sort_unstable();
    ids.iter()
        .map(|&id| {
            let map = archive.get(id).map_err(|e| match e {
                EncoderError::NotFound(_) => TrainError::MissingFeatures(id),
                other => other.into(),
            })?;
            let original = build_view(&map, store, task, k, false)?;
            let flipped = if flip {
                let fm = archive.get_flipped(id).map_err(|_| TrainError::MissingFlipped(id))?;
                Some(build_view(&fm, store, task, k, true)?)
            } else {
                None
            };
            Ok(Sample { grid: (map.grid_h, map.grid_w), original, flipped })
        })
        .collect()
}

/// Loss and flat parameter gradient for one view.
fn view_gradient(model: &PatchModel, view: &View, w: &LossWeights) -> Result<(f64, Vec<f64>), TrainError> {
    let mut grad = model.zeros_like();
    let loss = match &view.target {
        Target::Seg(gt) => {
            let (logits, cache) = model.forward_seg(&view.features)?;
            let (l, g) = loss_segmentation_logits(&logits, gt, w)?;
            model.backward(&cache, &g, &mut grad);
            l
        }
        Target::Det(t) => {
            let (grid, cache) = model.forward_det(&view.features)?;
            let (l, g) = loss_detection(&grid, t, w)?;
            model.backward(&cache, &g, &mut grad);
            l.total
        }
    };
    Ok((loss, grad.flat_params()))
}

/// Total task loss of a model on a feature tensor, used by gradient checks.
pub fn det_objective(model: &PatchModel, features: &Tensor3, targets: &DetTargets, w: &LossWeights) -> Result<(f64, Vec<f64>), TrainError> {
    view_gradient(model, &View { features: features.clone(), target: Target::Det(targets.clone()) }, w)
}

pub fn seg_objective(model: &PatchModel, features: &Tensor3, gt: &BinaryMask, w: &LossWeights) -> Result<(f64, Vec<f64>), TrainError> {
    view_gradient(model, &View { features: features.clone(), target: Target::Seg(gt.clone()) }, w)
}

/// Shuffle, then group by grid size (order of first appearance) and cut each group
/// into batches; the batch order is shuffled again.
fn make_batches(samples: &[Sample], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    for i in order {
        match groups.iter_mut().find(|(g, _)| *g == samples[i].grid) {
            Some((_, v)) => v.push(i),
            None => groups.push((samples[i].grid, vec![i])),
        }
    }
    let mut batches: Vec<Vec<usize>> =
        groups.into_iter().flat_map(|(_, v)| v.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>()).collect();
    batches.shuffle(rng);
    batches
}

/// Headline metric used for checkpoint selection: mIoU (seg) or mAP50 (det).
pub fn primary_metric(m: &Metrics) -> f64 {
    match m {
        Metrics::Seg(s) => s.miou,
        Metrics::Det(d) => d.map50,
    }
}

fn sorted_ids(store: &AnnotationStore) -> Vec<ImageId> {
    let mut ids: Vec<ImageId> = store.images.iter().map(|im| im.id).collect();
    ids.sort_unstable();
    ids
}

/// Binary masks at original resolution for every image of `store`, in id order.
pub fn predict_masks(
    model: &PatchModel,
    archive: &FeatureArchive,
    store: &AnnotationStore,
    pp: &PostprocessConfig,
) -> Result<Vec<(ImageId, BinaryMask)>, TrainError> {
    sorted_ids(store)
        .par_iter()
        .map(|&id| {
            let map = archive.get(id).map_err(|_| TrainError::MissingFeatures(id))?;
            let im = store.image(id).ok_or(TrainError::UnknownImage(id))?;
            let mask = predict_mask(model, &map)?
                .binarize(pp.mask)
                .resize_nearest(im.width as usize, im.height as usize);
            Ok((id, mask))
        })
        .collect()
}

/// Detections in original image coordinates for every image of `store`, in id order.
pub fn predict_records(
    model: &PatchModel,
    archive: &FeatureArchive,
    store: &AnnotationStore,
    pp: &PostprocessConfig,
) -> Result<Vec<PredictionRecord>, TrainError> {
    let class_ids = store.class_ids();
    let per_image = sorted_ids(store)
        .par_iter()
        .map(|&id| {
            let map = archive.get(id).map_err(|_| TrainError::MissingFeatures(id))?;
            let im = store.image(id).ok_or(TrainError::UnknownImage(id))?;
            let dets = predict_detections(model, &map, pp)?;
            Ok(to_records(&dets, &map, im, &class_ids))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Evaluate a model on every image of `store` at the original image resolution.
pub fn evaluate(
    model: &PatchModel,
    archive: &FeatureArchive,
    store: &AnnotationStore,
    pp: &PostprocessConfig,
) -> Result<Metrics, TrainError> {
    match model.task() {
        Task::Seg => {
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for (id, mask) in predict_masks(model, archive, store, pp)? {
                gts.push(store.foreground_mask(id).ok_or(TrainError::UnknownImage(id))?);
                preds.push(mask);
            }
            Ok(Metrics::Seg(seg_metrics(&preds, &gts)?))
        }
        Task::Det => {
            let preds = predict_records(model, archive, store, pp)?;
            Ok(Metrics::Det(map_report(&preds, store, pp.conf)?.metrics))
        }
    }
}

/// Labelled features for validation: an archive and the store restricted to it.
pub struct EvalSet<'a> {
    pub archive: &'a FeatureArchive,
    pub store: &'a AnnotationStore,
}

/// Train stem and head on every image of `store`. The archive is only read.
pub fn train(
    archive: &FeatureArchive,
    store: &AnnotationStore,
    model_config: ModelConfig,
    cfg: &TrainConfig,
    val: Option<EvalSet<'_>>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if model_config.stem.input_dim != archive.spec().embed_dim {
        return Err(TrainError::Shape(format!(
            "model expects {} input channels, archive holds {}",
            model_config.stem.input_dim,
            archive.spec().embed_dim
        )));
    }
    if let HeadConfig::Det(h) = &model_config.head {
        if h.num_classes != store.categories.len() {
            return Err(TrainError::Shape(format!(
                "head predicts {} classes, dataset has {}",
                h.num_classes,
                store.categories.len()
            )));
        }
    }
    let task = model_config.task();
    let samples = build_samples(archive, store, task, cfg.flip)?;
    if samples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut model = PatchModel::new(model_config)?;
    let mut params = model.flat_params();
    let mut adam = Adam::new(cfg.lr, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, PatchModel)> = None;
    let mut steps = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        // flip draws are made per sample index so they do not depend on batch order
        let flips: Vec<bool> = samples.iter().map(|s| s.flipped.is_some() && rng.gen_bool(0.5)).collect();
        let batches = make_batches(&samples, cfg.batch_size, &mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in batches {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                if seen == 0 {
                    break 'epochs;
                }
                break;
            }
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let view = if flips[i] { s.flipped.as_ref().unwrap() } else { &s.original };
                    view_gradient(&model, view, &cfg.weights)
                })
                .collect::<Result<_, TrainError>>()?;
            let scale = 1.0 / results.len() as f64;
            let mut grad = vec![0.0; params.len()];
            for (l, g) in &results {
                loss_sum += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b * scale;
                }
            }
            seen += results.len();
            adam.step(&mut params, &grad);
            model.set_flat_params(&params)?;
            steps += 1;
        }
        let val_metric = match &val {
            Some(v) => Some(primary_metric(&evaluate(&model, v.archive, v.store, &cfg.postprocess)?)),
            None => None,
        };
        let train_loss = loss_sum / seen.max(1) as f64;
        match val_metric {
            Some(v) => log::info!("epoch {epoch}: loss {train_loss:.6} val {v:.3}"),
            None => log::info!("epoch {epoch}: loss {train_loss:.6}"),
        }
        curve.push(EpochRecord { epoch, train_loss, val_metric });
        let score = val_metric.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| val_metric.is_none() || score > *b) {
            best = Some((score, epoch, model.clone()));
        }
    }

    let (_, best_epoch, best_model) = best.unwrap_or((f64::NEG_INFINITY, 0, model.clone()));
    Ok(TrainOutcome { best: best_model, last: model, best_epoch, steps, curve })
}

/// Loss curve as CSV with columns `epoch,train_loss,val_metric`.
pub fn write_loss_curve(curve: &[EpochRecord], path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
