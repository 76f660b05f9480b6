use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Conv2d;
use super::DecoderError;
use crate::encoder::PatchFeatureMap;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: &Tensor3) -> Tensor3 {
        let f = match self {
            Activation::Relu => |v: f64| v.max(0.0),
            Activation::Tanh => f64::tanh,
        };
        Tensor3 { data: x.data.iter().map(|&v| f(v)).collect(), ..x.clone() }
    }

    /// Gradient given pre-activation `pre` and post-activation `post`.
    pub fn backward(&self, pre: &Tensor3, post: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
        let data = match self {
            Activation::Relu => pre.data.iter().zip(&grad_out.data).map(|(p, g)| if *p > 0.0 { *g } else { 0.0 }).collect(),
            Activation::Tanh => post.data.iter().zip(&grad_out.data).map(|(y, g)| g * (1.0 - y * y)).collect(),
        };
        Tensor3 { data, ..grad_out.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub input_dim: usize,
    pub adapted_dim: usize,
    pub activation: Activation,
}

impl StemConfig {
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, adapted_dim: 256, activation: Activation::Relu }
    }
}

/// Two pointwise layers with a nonlinearity between them; the patch grid is untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub cfg: StemConfig,
    pub expand: Conv2d,
    pub project: Conv2d,
}

#[derive(Debug, Clone)]
pub struct StemCache {
    input: Tensor3,
    pre: Tensor3,
    act: Tensor3,
}

impl Stem {
    pub fn new<R: Rng>(cfg: StemConfig, rng: &mut R) -> Self {
        let expand = Conv2d::init(cfg.input_dim, cfg.adapted_dim, 1, rng);
        let project = Conv2d::init(cfg.adapted_dim, cfg.adapted_dim, 1, rng);
        Self { cfg, expand, project }
    }

    pub fn zeros_like(&self) -> Self {
        Self { cfg: self.cfg.clone(), expand: self.expand.zeros_like(), project: self.project.zeros_like() }
    }

    pub fn forward(&self, features: &PatchFeatureMap) -> Result<Tensor3, DecoderError> {
        Ok(self.forward_tensor(&features.to_tensor())?.0)
    }

    pub fn forward_tensor(&self, x: &Tensor3) -> Result<(Tensor3, StemCache), DecoderError> {
        if x.c != self.cfg.input_dim {
            return Err(DecoderError::ShapeMismatch(format!(
                "stem expects {} input channels, got {}",
                self.cfg.input_dim, x.c
            )));
        }
        let pre = self.expand.forward(x);
        let act = self.cfg.activation.apply(&pre);
        let out = self.project.forward(&act);
        Ok((out, StemCache { input: x.clone(), pre, act }))
    }

    pub fn backward(&self, cache: &StemCache, grad_out: &Tensor3, grad: &mut Stem) {
        let g_act = self.project.backward(&cache.act, grad_out, &mut grad.project);
        let g_pre = self.cfg.activation.backward(&cache.pre, &cache.act, &g_act);
        self.expand.backward(&cache.input, &g_pre, &mut grad.expand);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preserves_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stem = Stem::new(StemConfig { input_dim: 384, adapted_dim: 8, activation: Activation::Relu }, &mut rng);
        let x = Tensor3::filled(384, 30, 40, 0.01);
        let (y, _) = stem.forward_tensor(&x).unwrap();
        assert_eq!(y.shape(), (8, 30, 40));
        assert!(y.is_finite());
        assert_eq!(stem.forward_tensor(&x).unwrap().0, y);
    }

    #[test]
    fn zero_input_zero_final_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut stem = Stem::new(StemConfig::new(16), &mut rng);
        stem.project = stem.project.zeros_like();
        let (y, _) = stem.forward_tensor(&Tensor3::zeros(16, 3, 4)).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dim_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stem = Stem::new(StemConfig::new(16), &mut rng);
        assert!(stem.forward_tensor(&Tensor3::zeros(15, 3, 4)).is_err());
    }
}
