use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{upsample2x, upsample2x_backward, Conv2d};
use super::stem::Activation;
use super::DecoderError;
use crate::dataset::ImageId;
use crate::mask::BinaryMask;
use crate::tensor::{sigmoid, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegHeadConfig {
    pub in_dim: usize,
    /// Output width of each 2× stage; four stages give the 16× patch-to-pixel factor.
    pub stage_channels: [usize; 4],
}

impl SegHeadConfig {
    pub fn new(in_dim: usize) -> Self {
        Self { in_dim, stage_channels: [64, 32, 16, 8] }
    }
}

/// Four stages of (2× bilinear upsample, 3×3 conv, ReLU) and a pointwise
/// projection to one logit channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead {
    pub cfg: SegHeadConfig,
    pub stages: Vec<Conv2d>,
    pub project: Conv2d,
}

#[derive(Debug, Clone)]
pub struct SegCache {
    /// `(pre-upsample size, upsampled input, pre-activation, activation)` per stage.
    stages: Vec<((usize, usize), Tensor3, Tensor3, Tensor3)>,
}

impl SegHead {
    pub fn new<R: Rng>(cfg: SegHeadConfig, rng: &mut R) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut c_in = cfg.in_dim;
        for &c_out in &cfg.stage_channels {
            stages.push(Conv2d::init(c_in, c_out, 3, rng));
            c_in = c_out;
        }
        let mut project = Conv2d::init(c_in, 1, 1, rng);
        project.weight.iter_mut().for_each(|w| *w *= 0.1);
        Self { cfg, stages, project }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            stages: self.stages.iter().map(Conv2d::zeros_like).collect(),
            project: self.project.zeros_like(),
        }
    }

    /// Logits at `(1, 16·H_p, 16·W_p)`.
    pub fn forward_logits(&self, adapted: &Tensor3) -> Result<(Tensor3, SegCache), DecoderError> {
        if adapted.c != self.cfg.in_dim {
            return Err(DecoderError::ShapeMismatch(format!(
                "seg head expects {} channels, got {}",
                self.cfg.in_dim, adapted.c
            )));
        }
        let mut cache = SegCache { stages: Vec::with_capacity(4) };
        let mut x = adapted.clone();
        for conv in &self.stages {
            let size = (x.h, x.w);
            let up = upsample2x(&x);
            let pre = conv.forward(&up);
            let act = Activation::Relu.apply(&pre);
            x = act.clone();
            cache.stages.push((size, up, pre, act));
        }
        Ok((self.project.forward(&x), cache))
    }

    pub fn forward(&self, adapted: &Tensor3, image_id: ImageId) -> Result<DenseMask, DecoderError> {
        let (logits, _) = self.forward_logits(adapted)?;
        Ok(DenseMask::from_logits(&logits, image_id))
    }

    pub fn backward(&self, cache: &SegCache, grad_logits: &Tensor3, grad: &mut SegHead) -> Tensor3 {
        let last = &cache.stages.last().expect("four stages").3;
        let mut g = self.project.backward(last, grad_logits, &mut grad.project);
        for (k, conv) in self.stages.iter().enumerate().rev() {
            let ((h, w), up, pre, act) = &cache.stages[k];
            let g_pre = Activation::Relu.backward(pre, act, &g);
            let g_up = conv.backward(up, &g_pre, &mut grad.stages[k]);
            g = upsample2x_backward(&g_up, *h, *w);
        }
        g
    }
}

/// Per-pixel foreground probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMask {
    pub image_id: ImageId,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

impl DenseMask {
    pub fn from_logits(logits: &Tensor3, image_id: ImageId) -> Self {
        Self {
            image_id,
            height: logits.h,
            width: logits.w,
            probs: logits.data.iter().map(|&v| sigmoid(v)).collect(),
        }
    }

    pub fn filled(image_id: ImageId, width: usize, height: usize, p: f64) -> Self {
        Self { image_id, height, width, probs: vec![p; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.probs[y * self.width + x]
    }

    /// Foreground where the probability reaches `threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask::from_vec(self.width, self.height, self.probs.iter().map(|&p| p >= threshold).collect())
    }
}
