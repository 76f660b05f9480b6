//! Anchor-free detection on the patch grid.
//!
//! Patch `(i, j)` (row, column) is the implicit anchor for one box. Offsets are in
//! patch units relative to the patch centre, with log-scale extents of base size P:
//!
//! ```text
//! cx = (j + 0.5 + t_x)·P    cy = (i + 0.5 + t_y)·P
//! w  = P·exp(t_w)           h  = P·exp(t_h)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::stem::Activation;
use super::DecoderError;
use crate::dataset::InstanceId;
use crate::geometry::BBox;
use crate::tensor::{sigmoid, Tensor3};
use crate::PATCH_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetHeadConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

/// 3×3 hidden layer on the patch grid followed by a pointwise projection to
/// `1 + K + 4` channels: objectness, class logits, box offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct DetHead {
    pub cfg: DetHeadConfig,
    pub hidden: Conv2d,
    pub output: Conv2d,
}

#[derive(Debug, Clone)]
pub struct DetCache {
    input: Tensor3,
    pre: Tensor3,
    act: Tensor3,
}

impl DetHead {
    pub fn new<R: Rng>(cfg: DetHeadConfig, rng: &mut R) -> Self {
        assert!(cfg.num_classes >= 1, "at least one class");
        let hidden = Conv2d::init(cfg.in_dim, cfg.hidden_dim, 3, rng);
        let mut output = Conv2d::init(cfg.hidden_dim, 5 + cfg.num_classes, 1, rng);
        output.weight.iter_mut().for_each(|w| *w *= 0.1);
        // start with a low objectness prior so the all-background majority is cheap
        output.bias[0] = -4.0;
        Self { cfg, hidden, output }
    }

    pub fn zeros_like(&self) -> Self {
        Self { cfg: self.cfg.clone(), hidden: self.hidden.zeros_like(), output: self.output.zeros_like() }
    }

    pub fn forward(&self, adapted: &Tensor3) -> Result<DetGrid, DecoderError> {
        Ok(self.forward_train(adapted)?.0)
    }

    pub fn forward_train(&self, adapted: &Tensor3) -> Result<(DetGrid, DetCache), DecoderError> {
        if adapted.c != self.cfg.in_dim {
            return Err(DecoderError::ShapeMismatch(format!(
                "det head expects {} channels, got {}",
                self.cfg.in_dim, adapted.c
            )));
        }
        let pre = self.hidden.forward(adapted);
        let act = Activation::Relu.apply(&pre);
        let raw = self.output.forward(&act);
        let grid = DetGrid::from_raw(&raw, self.cfg.num_classes);
        Ok((grid, DetCache { input: adapted.clone(), pre, act }))
    }

    /// `grad_raw` is the gradient w.r.t. the stacked `(1 + K + 4)`-channel output.
    pub fn backward(&self, cache: &DetCache, grad_raw: &Tensor3, grad: &mut DetHead) -> Tensor3 {
        let g_act = self.output.backward(&cache.act, grad_raw, &mut grad.output);
        let g_pre = Activation::Relu.backward(&cache.pre, &cache.act, &g_act);
        self.hidden.backward(&cache.input, &g_pre, &mut grad.hidden)
    }
}

/// Raw head output for one image. All three tensors share the `(H_p, W_p)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DetGrid {
    /// `(1, H_p, W_p)` objectness logits.
    pub objectness: Tensor3,
    /// `(K, H_p, W_p)` class logits.
    pub class_scores: Tensor3,
    /// `(4, H_p, W_p)` as `(t_x, t_y, t_w, t_h)`.
    pub offsets: Tensor3,
}

impl DetGrid {
    pub fn from_raw(raw: &Tensor3, num_classes: usize) -> Self {
        let n = raw.h * raw.w;
        let slice = |from: usize, count: usize| {
            Tensor3::from_vec(count, raw.h, raw.w, raw.data[from * n..(from + count) * n].to_vec())
        };
        Self { objectness: slice(0, 1), class_scores: slice(1, num_classes), offsets: slice(1 + num_classes, 4) }
    }

    /// Stack back into the `(1 + K + 4)`-channel layout.
    pub fn to_raw(&self) -> Tensor3 {
        let (h, w) = self.grid();
        let mut data = self.objectness.data.clone();
        data.extend_from_slice(&self.class_scores.data);
        data.extend_from_slice(&self.offsets.data);
        Tensor3::from_vec(5 + self.num_classes(), h, w, data)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.objectness.h, self.objectness.w)
    }

    pub fn num_classes(&self) -> usize {
        self.class_scores.c
    }

    pub fn objectness_prob(&self, i: usize, j: usize) -> f64 {
        sigmoid(self.objectness.at(0, i, j))
    }

    pub fn class_prob(&self, k: usize, i: usize, j: usize) -> f64 {
        sigmoid(self.class_scores.at(k, i, j))
    }

    pub fn validate(&self) -> Result<(), DecoderError> {
        let g = self.grid();
        let same = |t: &Tensor3| (t.h, t.w) == g;
        if !same(&self.class_scores) || !same(&self.offsets) || self.offsets.c != 4 || self.num_classes() == 0 {
            return Err(DecoderError::ShapeMismatch("det grid tensors disagree".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    /// Class index into the sorted category list.
    pub class: usize,
}

/// One box hypothesis per patch, in row-major patch order, clipped to the image
/// (`H_p·P × W_p·P`). Score is objectness times the best class probability.
pub fn decode_boxes(grid: &DetGrid) -> Vec<Detection> {
    let (gh, gw) = grid.grid();
    let p = PATCH_SIZE as f64;
    let (img_w, img_h) = (gw as f64 * p, gh as f64 * p);
    let mut out = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let [tx, ty, tw, th] = [0, 1, 2, 3].map(|c| grid.offsets.at(c, i, j));
            let cx = (j as f64 + 0.5 + tx) * p;
            let cy = (i as f64 + 0.5 + ty) * p;
            // exp overflow saturates to inf, which clipping then bounds
            let w = (p * tw.exp()).min(f64::MAX);
            let h = (p * th.exp()).min(f64::MAX);
            let bbox = BBox::from_xyxy(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h).clip(img_w, img_h);
            let (class, cls_prob) = (0..grid.num_classes())
                .map(|k| (k, grid.class_prob(k, i, j)))
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            out.push(Detection { bbox, score: grid.objectness_prob(i, j) * cls_prob, class });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub instance_id: InstanceId,
    pub bbox: BBox,
    pub class: usize,
}

/// Training targets on the patch grid (row-major per patch).
#[derive(Debug, Clone, PartialEq)]
pub struct DetTargets {
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_classes: usize,
    /// Instance that owns each patch; `Some` marks a positive.
    pub owner: Vec<Option<InstanceId>>,
    pub class: Vec<usize>,
    pub offsets: Vec<[f64; 4]>,
}

impl DetTargets {
    pub fn is_positive(&self, p: usize) -> bool {
        self.owner[p].is_some()
    }

    pub fn positives(&self) -> usize {
        self.owner.iter().filter(|o| o.is_some()).count()
    }

    /// Mirror horizontally: columns reversed, `t_x` negated about the patch centre.
    pub fn hflip(&self) -> DetTargets {
        let mut out = self.clone();
        for i in 0..self.grid_h {
            for j in 0..self.grid_w {
                let src = i * self.grid_w + (self.grid_w - 1 - j);
                let dst = i * self.grid_w + j;
                out.owner[dst] = self.owner[src];
                out.class[dst] = self.class[src];
                let [tx, ty, tw, th] = self.offsets[src];
                out.offsets[dst] = [if self.owner[src].is_some() { -tx } else { tx }, ty, tw, th];
            }
        }
        out
    }
}

/// Centre-patch assignment: each GT goes to the patch containing its centre
/// (`floor(c / P)`, so a centre on a boundary belongs to the higher-index patch).
/// Collisions keep the larger box, then the lower instance id.
pub fn encode_targets(
    gts: &[GtBox],
    grid_h: usize,
    grid_w: usize,
    num_classes: usize,
) -> Result<DetTargets, DecoderError> {
    let n = grid_h * grid_w;
    let p = PATCH_SIZE as f64;
    let mut t = DetTargets {
        grid_h,
        grid_w,
        num_classes,
        owner: vec![None; n],
        class: vec![0; n],
        offsets: vec![[0.0; 4]; n],
    };
    let mut owner_box: Vec<Option<(f64, InstanceId)>> = vec![None; n];
    for gt in gts {
        if !gt.bbox.is_valid() {
            return Err(DecoderError::DegenerateBox(gt.instance_id));
        }
        if gt.class >= num_classes {
            return Err(DecoderError::ShapeMismatch(format!("class {} with K = {num_classes}", gt.class)));
        }
        let (cx, cy) = gt.bbox.center();
        let j = ((cx / p).floor().max(0.0) as usize).min(grid_w - 1);
        let i = ((cy / p).floor().max(0.0) as usize).min(grid_h - 1);
        let idx = i * grid_w + j;
        let area = gt.bbox.area();
        let wins = match owner_box[idx] {
            None => true,
            Some((a, id)) => area > a || (area == a && gt.instance_id < id),
        };
        if wins {
            owner_box[idx] = Some((area, gt.instance_id));
            t.owner[idx] = Some(gt.instance_id);
            t.class[idx] = gt.class;
            t.offsets[idx] = [
                cx / p - j as f64 - 0.5,
                cy / p - i as f64 - 0.5,
                (gt.bbox.w / p).ln(),
                (gt.bbox.h / p).ln(),
            ];
        }
    }
    Ok(t)
}
