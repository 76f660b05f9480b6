use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::det::{DetCache, DetGrid, DetHead, DetHeadConfig};
use super::layers::Conv2d;
use super::seg::{SegCache, SegHead, SegHeadConfig};
use super::stem::{Stem, StemCache, StemConfig};
use super::DecoderError;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Det,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seg" => Ok(Task::Seg),
            "det" => Ok(Task::Det),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum HeadConfig {
    Seg(SegHeadConfig),
    Det(DetHeadConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stem: StemConfig,
    pub head: HeadConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Defaults for a task: 256-wide stem, det hidden width equal to the stem width.
    pub fn for_task(task: Task, input_dim: usize, num_classes: usize) -> Self {
        let stem = StemConfig::new(input_dim);
        let head = match task {
            Task::Seg => HeadConfig::Seg(SegHeadConfig::new(stem.adapted_dim)),
            Task::Det => HeadConfig::Det(DetHeadConfig {
                in_dim: stem.adapted_dim,
                hidden_dim: stem.adapted_dim,
                num_classes,
            }),
        };
        Self { stem, head, init_seed: 0 }
    }

    /// Same architecture with a different stem width; the det hidden width follows it.
    pub fn with_stem_dim(mut self, dim: usize) -> Self {
        self.stem.adapted_dim = dim;
        match &mut self.head {
            HeadConfig::Seg(s) => s.in_dim = dim,
            HeadConfig::Det(d) => {
                d.in_dim = dim;
                d.hidden_dim = dim;
            }
        }
        self
    }

    pub fn task(&self) -> Task {
        match self.head {
            HeadConfig::Seg(_) => Task::Seg,
            HeadConfig::Det(_) => Task::Det,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Seg(SegHead),
    Det(DetHead),
}

/// Trainable stem plus one task head. The frozen encoder is not part of it.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchModel {
    pub config: ModelConfig,
    pub stem: Stem,
    pub head: Head,
}

pub enum ModelCache {
    Seg(StemCache, SegCache),
    Det(StemCache, DetCache),
}

impl PatchModel {
    pub fn new(config: ModelConfig) -> Result<Self, DecoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let stem = Stem::new(config.stem.clone(), &mut rng);
        let head_in = match &config.head {
            HeadConfig::Seg(c) => c.in_dim,
            HeadConfig::Det(c) => c.in_dim,
        };
        if head_in != config.stem.adapted_dim {
            return Err(DecoderError::ShapeMismatch(format!(
                "head input {head_in} != stem output {}",
                config.stem.adapted_dim
            )));
        }
        let head = match &config.head {
            HeadConfig::Seg(c) => Head::Seg(SegHead::new(c.clone(), &mut rng)),
            HeadConfig::Det(c) => Head::Det(DetHead::new(c.clone(), &mut rng)),
        };
        Ok(Self { config, stem, head })
    }

    pub fn task(&self) -> Task {
        self.config.task()
    }

    pub fn zeros_like(&self) -> Self {
        let head = match &self.head {
            Head::Seg(h) => Head::Seg(h.zeros_like()),
            Head::Det(h) => Head::Det(h.zeros_like()),
        };
        Self { config: self.config.clone(), stem: self.stem.zeros_like(), head }
    }

    /// Layers in a fixed order; this order defines the flat parameter layout.
    pub fn layers(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.stem.expand, &self.stem.project];
        match &self.head {
            Head::Seg(h) => {
                v.extend(h.stages.iter());
                v.push(&h.project);
            }
            Head::Det(h) => v.extend([&h.hidden, &h.output]),
        }
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v = vec![&mut self.stem.expand, &mut self.stem.project];
        match &mut self.head {
            Head::Seg(h) => {
                v.extend(h.stages.iter_mut());
                v.push(&mut h.project);
            }
            Head::Det(h) => v.extend([&mut h.hidden, &mut h.output]),
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), DecoderError> {
        if flat.len() != self.param_count() {
            return Err(DecoderError::ShapeMismatch(format!(
                "{} parameters supplied, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        for l in self.layers_mut() {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(())
    }

    pub fn forward_det(&self, features: &Tensor3) -> Result<(DetGrid, ModelCache), DecoderError> {
        let Head::Det(head) = &self.head else {
            return Err(DecoderError::ShapeMismatch("model has a segmentation head".into()));
        };
        let (adapted, sc) = self.stem.forward_tensor(features)?;
        let (grid, hc) = head.forward_train(&adapted)?;
        Ok((grid, ModelCache::Det(sc, hc)))
    }

    /// Segmentation logits at full resolution.
    pub fn forward_seg(&self, features: &Tensor3) -> Result<(Tensor3, ModelCache), DecoderError> {
        let Head::Seg(head) = &self.head else {
            return Err(DecoderError::ShapeMismatch("model has a detection head".into()));
        };
        let (adapted, sc) = self.stem.forward_tensor(features)?;
        let (logits, hc) = head.forward_logits(&adapted)?;
        Ok((logits, ModelCache::Seg(sc, hc)))
    }

    /// Backpropagate the gradient of the head output (stacked det channels or seg
    /// logits) and accumulate parameter gradients into `grad`.
    pub fn backward(&self, cache: &ModelCache, grad_output: &Tensor3, grad: &mut PatchModel) {
        let g_adapted = match (cache, &self.head, &mut grad.head) {
            (ModelCache::Det(_, hc), Head::Det(h), Head::Det(gh)) => h.backward(hc, grad_output, gh),
            (ModelCache::Seg(_, hc), Head::Seg(h), Head::Seg(gh)) => h.backward(hc, grad_output, gh),
            _ => panic!("cache and model heads disagree"),
        };
        let sc = match cache {
            ModelCache::Det(sc, _) | ModelCache::Seg(sc, _) => sc,
        };
        self.stem.backward(sc, &g_adapted, &mut grad.stem);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip() {
        let mut cfg = ModelConfig::for_task(Task::Det, 6, 1);
        cfg.stem.adapted_dim = 4;
        cfg.head = HeadConfig::Det(DetHeadConfig { in_dim: 4, hidden_dim: 3, num_classes: 1 });
        let mut m = PatchModel::new(cfg).unwrap();
        let flat = m.flat_params();
        assert_eq!(flat.len(), m.param_count());
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        m.set_flat_params(&doubled).unwrap();
        assert_eq!(m.flat_params(), doubled);
        assert!(m.set_flat_params(&doubled[1..]).is_err());
    }

    #[test]
    fn mismatched_head_rejected() {
        let mut cfg = ModelConfig::for_task(Task::Seg, 6, 1);
        cfg.stem.adapted_dim = 5;
        assert!(PatchModel::new(cfg).is_err());
    }
}
