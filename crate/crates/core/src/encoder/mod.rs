//! Image preprocessing, the pluggable frozen encoder interface and the on-disk
//! feature cache.

mod archive;
mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageId;
use crate::tensor::Tensor3;
use crate::PATCH_SIZE;

pub use archive::{read_archive, write_archive, ArchiveHeader, ArchiveWriter, FeatureArchive, ARCHIVE_MAGIC};
pub use mock::{MockEncoder, SIGNAL_RGB};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const DEFAULT_LONG_SIDE: u32 = 640;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("degenerate image {width}x{height}")]
    DegenerateImage { width: u32, height: u32 },
    #[error("image {width}x{height} is not divisible by the patch size")]
    NotPatchAligned { width: usize, height: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no backend available for encoder variant {0}")]
    BackendUnavailable(Variant),
    #[error("feature map contains non-finite values")]
    NonFinite,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt feature archive: {0}")]
    Corrupt(String),
    #[error("image {0} not found in archive")]
    NotFound(ImageId),
    #[error("duplicate archive entry for image {0}")]
    DuplicateEntry(ImageId),
}

/// Backbone size variants; all use 16×16 patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "S")]
    Small,
    #[serde(rename = "S+")]
    SmallPlus,
    #[serde(rename = "B")]
    Base,
    #[serde(rename = "L")]
    Large,
    #[serde(rename = "mock")]
    Mock,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Small => "S",
            Variant::SmallPlus => "S+",
            Variant::Base => "B",
            Variant::Large => "L",
            Variant::Mock => "mock",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Variant::Small),
            "s+" => Ok(Variant::SmallPlus),
            "b" => Ok(Variant::Base),
            "l" => Ok(Variant::Large),
            "mock" => Ok(Variant::Mock),
            other => Err(format!("unknown encoder variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub variant: Variant,
}

/// Normalized `(3, H, W)` image with H and W multiples of the patch size.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    /// Size of the raster before resizing, `(height, width)`.
    pub source_size: (u32, u32),
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / PATCH_SIZE, self.width / PATCH_SIZE)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn hflip(&self) -> ImageTensor {
        let mut data = vec![0.0; self.data.len()];
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    data[(c * self.height + y) * self.width + x] = self.at(c, y, self.width - 1 - x);
                }
            }
        }
        ImageTensor { data, ..self.clone() }
    }
}

/// Output size for a `width × height` source: the long side is scaled to `target`,
/// then each axis is floored to a multiple of the patch size (minimum one patch).
pub fn resized_dims(width: u32, height: u32, target: u32) -> (u32, u32) {
    let long = width.max(height) as u64;
    let p = PATCH_SIZE as u64;
    let fit = |d: u32| {
        let scaled = d as u64 * target as u64 / long;
        ((scaled / p) * p).max(p) as u32
    };
    (fit(width), fit(height))
}

/// Resize (aspect preserving, patch aligned) and normalize with ImageNet statistics.
pub fn preprocess(image: &RgbImage, target_long_side: u32) -> Result<ImageTensor, EncoderError> {
    let (w0, h0) = image.dimensions();
    let min = PATCH_SIZE as u32;
    if w0 < min || h0 < min || target_long_side < min {
        return Err(EncoderError::DegenerateImage { width: w0, height: h0 });
    }
    let (w, h) = resized_dims(w0, h0, target_long_side);
    let resized;
    let src = if (w, h) == (w0, h0) {
        image
    } else {
        resized = imageops::resize(image, w, h, imageops::FilterType::Triangle);
        &resized
    };
    let (wu, hu) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * wu * hu];
    for (x, y, px) in src.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f32 / 255.0;
            data[(c * hu + y as usize) * wu + x as usize] = (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    Ok(ImageTensor { height: hu, width: wu, source_size: (h0, w0), data })
}

/// Dense per-image patch features, shape `(channels, grid_h, grid_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    pub image_id: ImageId,
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Preprocessed image size; always `grid * PATCH_SIZE`.
    pub image_h: usize,
    pub image_w: usize,
    pub data: Vec<f32>,
}

impl PatchFeatureMap {
    pub fn new(image_id: ImageId, channels: usize, grid_h: usize, grid_w: usize, data: Vec<f32>) -> Result<Self, EncoderError> {
        if channels == 0 || grid_h == 0 || grid_w == 0 || data.len() != channels * grid_h * grid_w {
            return Err(EncoderError::DimensionMismatch(format!(
                "{} values for shape ({channels}, {grid_h}, {grid_w})",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(EncoderError::NonFinite);
        }
        Ok(Self {
            image_id,
            channels,
            grid_h,
            grid_w,
            image_h: grid_h * PATCH_SIZE,
            image_w: grid_w * PATCH_SIZE,
            data,
        })
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.grid_h + i) * self.grid_w + j]
    }

    /// Feature vector of patch `(i, j)`.
    pub fn patch(&self, i: usize, j: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.at(c, i, j)).collect()
    }

    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3::from_vec(self.channels, self.grid_h, self.grid_w, self.data.iter().map(|&v| v as f64).collect())
    }
}

/// A frozen patch-token encoder. Implementations must be deterministic: the same
/// preprocessed image always yields the same features.
pub trait Encoder: Send + Sync {
    fn spec(&self) -> &EncoderSpec;
    fn encode(&self, image: &ImageTensor, image_id: ImageId) -> Result<PatchFeatureMap, EncoderError>;
}

/// Run an encoder and enforce the grid contract on its output.
pub fn extract(encoder: &dyn Encoder, image: &ImageTensor, image_id: ImageId) -> Result<PatchFeatureMap, EncoderError> {
    let p = encoder.spec().patch_size;
    if p != PATCH_SIZE {
        return Err(EncoderError::DimensionMismatch(format!("patch size {p}, expected {PATCH_SIZE}")));
    }
    if !image.height.is_multiple_of(p) || !image.width.is_multiple_of(p) || image.height == 0 || image.width == 0 {
        return Err(EncoderError::NotPatchAligned { width: image.width, height: image.height });
    }
    let map = encoder.encode(image, image_id)?;
    let (gh, gw) = image.grid();
    if (map.grid_h, map.grid_w) != (gh, gw) || map.channels != encoder.spec().embed_dim {
        return Err(EncoderError::DimensionMismatch(format!(
            "backend returned ({}, {}, {}), expected ({}, {gh}, {gw})",
            map.channels,
            map.grid_h,
            map.grid_w,
            encoder.spec().embed_dim
        )));
    }
    Ok(map)
}

/// Preprocess and encode one raster, optionally also its horizontal mirror.
pub fn encode_image(
    encoder: &dyn Encoder,
    image: &RgbImage,
    image_id: ImageId,
    long_side: u32,
    with_flipped: bool,
) -> Result<(PatchFeatureMap, Option<PatchFeatureMap>), EncoderError> {
    let t = preprocess(image, long_side)?;
    let map = extract(encoder, &t, image_id)?;
    let flipped = if with_flipped { Some(extract(encoder, &t.hflip(), image_id)?) } else { None };
    Ok((map, flipped))
}

/// Variant → backend lookup. Embedding widths come from the registered backend.
#[derive(Default)]
pub struct EncoderRegistry {
    backends: BTreeMap<Variant, Box<dyn Encoder>>,
}

impl EncoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the in-repo mock backend of the given width.
    pub fn with_mock(channels: usize) -> Self {
        let mut r = Self::new();
        r.register(Box::new(MockEncoder::new(channels)));
        r
    }

    pub fn register(&mut self, backend: Box<dyn Encoder>) {
        self.backends.insert(backend.spec().variant, backend);
    }

    pub fn get(&self, variant: Variant) -> Result<&dyn Encoder, EncoderError> {
        self.backends
            .get(&variant)
            .map(|b| b.as_ref())
            .ok_or(EncoderError::BackendUnavailable(variant))
    }

    pub fn spec(&self, variant: Variant) -> Result<&EncoderSpec, EncoderError> {
        self.get(variant).map(|b| b.spec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_rule() {
        assert_eq!(resized_dims(1000, 750, 640), (640, 480));
        assert_eq!(resized_dims(640, 640, 640), (640, 640));
        // 488 * 640 / 650 = 480.49 -> 480
        assert_eq!(resized_dims(650, 488, 640), (640, 480));
        assert_eq!(resized_dims(2000, 20, 640), (640, 16));
    }

    #[test]
    fn preprocess_normalizes_and_aligns() {
        let img = RgbImage::from_pixel(1000, 750, image::Rgb([124, 116, 104]));
        let t = preprocess(&img, 640).unwrap();
        assert_eq!((t.width, t.height), (640, 480));
        assert_eq!(t.grid(), (30, 40));
        assert_eq!(t.source_size, (750, 1000));
        // 124/255 = 0.486 ≈ mean -> near zero
        assert!(t.data[0].abs() < 0.01);

        let same = RgbImage::from_pixel(640, 640, image::Rgb([255, 0, 0]));
        let t = preprocess(&same, 640).unwrap();
        assert_eq!((t.width, t.height), (640, 640));
        assert!((t.at(0, 5, 5) - (1.0 - 0.485) / 0.229).abs() < 1e-6);
    }

    #[test]
    fn degenerate_image_rejected() {
        let img = RgbImage::new(0, 40);
        assert!(matches!(preprocess(&img, 640), Err(EncoderError::DegenerateImage { .. })));
        let img = RgbImage::new(15, 40);
        assert!(preprocess(&img, 640).is_err());
    }

    #[test]
    fn registry_reports_missing_backend() {
        let reg = EncoderRegistry::with_mock(8);
        assert_eq!(reg.spec(Variant::Mock).unwrap().embed_dim, 8);
        assert!(matches!(reg.get(Variant::Large), Err(EncoderError::BackendUnavailable(Variant::Large))));
    }

    #[test]
    fn extract_checks_alignment() {
        let enc = MockEncoder::new(4);
        let t = ImageTensor { height: 40, width: 32, source_size: (40, 32), data: vec![0.0; 3 * 40 * 32] };
        assert!(matches!(extract(&enc, &t, 1), Err(EncoderError::NotPatchAligned { .. })));
    }

    #[test]
    fn feature_map_rejects_nan() {
        assert!(matches!(PatchFeatureMap::new(1, 1, 1, 1, vec![f32::NAN]), Err(EncoderError::NonFinite)));
    }
}
