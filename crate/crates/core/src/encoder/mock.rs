//! Deterministic stand-in for a pretrained backbone.
//!
//! Features are uniform noise in `[-0.5, 0.5]` seeded by a SHA-256 of the image
//! content and grid size. Patches whose 16×16 block is mostly [`SIGNAL_RGB`] get a
//! fixed `±2` sign-pattern offset added, which makes synthetic foreground linearly
//! separable: the projection onto the sign pattern is at least `1.5·C` for signal
//! patches and at most `0.5·C` for the rest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Encoder, EncoderError, EncoderSpec, ImageTensor, PatchFeatureMap, Variant, IMAGENET_MEAN, IMAGENET_STD};
use crate::dataset::ImageId;
use crate::PATCH_SIZE;

/// Fixture colour marking foreground in synthetic scenes.
pub const SIGNAL_RGB: [u8; 3] = [70, 60, 150];
const SIGNAL_TOLERANCE: f32 = 12.0;
const OFFSET_MAGNITUDE: f32 = 2.0;
const NOISE_HALF_WIDTH: f32 = 0.5;
const OFFSET_SEED: u64 = 0x005E_ED0F_F5E7;

#[derive(Debug, Clone)]
pub struct MockEncoder {
    spec: EncoderSpec,
    offset: Vec<f32>,
}

impl MockEncoder {
    pub fn new(channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(OFFSET_SEED);
        let offset = (0..channels)
            .map(|_| if rng.gen::<bool>() { OFFSET_MAGNITUDE } else { -OFFSET_MAGNITUDE })
            .collect();
        Self {
            spec: EncoderSpec { name: "mock".into(), patch_size: PATCH_SIZE, embed_dim: channels, variant: Variant::Mock },
            offset,
        }
    }

    pub fn offset(&self) -> &[f32] {
        &self.offset
    }

    /// Seed derived from the image content and grid size.
    pub fn content_seed(image: &ImageTensor) -> u64 {
        let mut h = Sha256::new();
        let (gh, gw) = image.grid();
        h.update((gh as u64).to_le_bytes());
        h.update((gw as u64).to_le_bytes());
        for v in &image.data {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// The noise component alone, laid out `(C, grid_h, grid_w)`.
    pub fn base_features(&self, image: &ImageTensor) -> Vec<f32> {
        let (gh, gw) = image.grid();
        let c = self.spec.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(Self::content_seed(image));
        let mut data = vec![0.0; c * gh * gw];
        // patch-major draw order, channel-major storage
        for i in 0..gh {
            for j in 0..gw {
                for ch in 0..c {
                    data[(ch * gh + i) * gw + j] = rng.gen_range(-NOISE_HALF_WIDTH..NOISE_HALF_WIDTH);
                }
            }
        }
        data
    }

    /// Row-major flags: true where a strict majority of the block's pixels match the signal colour.
    pub fn signal_patches(image: &ImageTensor) -> Vec<bool> {
        let (gh, gw) = image.grid();
        let mut out = Vec::with_capacity(gh * gw);
        let majority = PATCH_SIZE * PATCH_SIZE / 2;
        for i in 0..gh {
            for j in 0..gw {
                let mut hits = 0;
                for y in i * PATCH_SIZE..(i + 1) * PATCH_SIZE {
                    for x in j * PATCH_SIZE..(j + 1) * PATCH_SIZE {
                        let is_signal = (0..3).all(|c| {
                            let raw = (image.at(c, y, x) * IMAGENET_STD[c] + IMAGENET_MEAN[c]) * 255.0;
                            (raw - SIGNAL_RGB[c] as f32).abs() <= SIGNAL_TOLERANCE
                        });
                        hits += is_signal as usize;
                    }
                }
                out.push(hits > majority);
            }
        }
        out
    }
}

impl Encoder for MockEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, image: &ImageTensor, image_id: ImageId) -> Result<PatchFeatureMap, EncoderError> {
        let (gh, gw) = image.grid();
        let c = self.spec.embed_dim;
        let mut data = self.base_features(image);
        for (p, signal) in Self::signal_patches(image).into_iter().enumerate() {
            if signal {
                let (i, j) = (p / gw, p % gw);
                for ch in 0..c {
                    data[(ch * gh + i) * gw + j] += self.offset[ch];
                }
            }
        }
        PatchFeatureMap::new(image_id, c, gh, gw, data)
    }
}
