//! Dataset normalization: a single COCO-style annotation model with
//! validation, mask-derived boxes and deterministic splits.

mod coco;
mod split;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::mask::{BinaryMask, MaskGeometry};

pub use coco::{load_coco, load_source, read_split_map, to_coco_json, write_coco};
pub use split::{split_dataset, split_sizes, SplitMode, SplitPolicy};

pub type ImageId = u64;
pub type CategoryId = u64;
pub type InstanceId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: InstanceId,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    /// `None` for mask-only sources until [`derive_bboxes`] runs.
    pub bbox: Option<BBox>,
    pub mask: Option<MaskGeometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationStore {
    pub images: Vec<ImageRecord>,
    pub categories: Vec<Category>,
    pub instances: Vec<Instance>,
    /// Empty until a split policy has been applied.
    pub splits: BTreeMap<ImageId, Split>,
}

impl AnnotationStore {
    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn instances_for(&self, image_id: ImageId) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |inst| inst.image_id == image_id)
    }

    pub fn image_ids_in(&self, split: Split) -> Vec<ImageId> {
        self.splits.iter().filter(|(_, s)| **s == split).map(|(id, _)| *id).collect()
    }

    /// Copy holding only the listed images, their instances and split entries.
    /// Categories are kept whole so class indices stay stable.
    pub fn subset(&self, ids: &[ImageId]) -> AnnotationStore {
        let keep: std::collections::BTreeSet<ImageId> = ids.iter().copied().collect();
        AnnotationStore {
            images: self.images.iter().filter(|im| keep.contains(&im.id)).cloned().collect(),
            categories: self.categories.clone(),
            instances: self.instances.iter().filter(|i| keep.contains(&i.image_id)).cloned().collect(),
            splits: self.splits.iter().filter(|(id, _)| keep.contains(id)).map(|(k, v)| (*k, *v)).collect(),
        }
    }

    pub fn split_subset(&self, split: Split) -> AnnotationStore {
        self.subset(&self.image_ids_in(split))
    }

    /// Sorted category ids; the position in this list is the class index used by the heads.
    pub fn class_ids(&self) -> Vec<CategoryId> {
        let mut ids: Vec<_> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Per-split image counts as `(train, val, test)`.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for s in self.splits.values() {
            match s {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }

    /// Union of all instance masks of one image (boxes fill in for maskless instances).
    pub fn foreground_mask(&self, image_id: ImageId) -> Option<BinaryMask> {
        let im = self.image(image_id)?;
        let (w, h) = (im.width as usize, im.height as usize);
        let mut mask = BinaryMask::new(w, h);
        for inst in self.instances_for(image_id) {
            match (&inst.mask, &inst.bbox) {
                (Some(geom), _) => {
                    if let Some(m) = geom.rasterize(w, h) {
                        mask.union_with(&m);
                    }
                }
                (None, Some(b)) => mask.fill_box(b),
                (None, None) => {}
            }
        }
        Some(mask)
    }
}

/// A single broken invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateImageId(ImageId),
    DuplicateCategoryId(CategoryId),
    DuplicateInstanceId(InstanceId),
    EmptyImage(ImageId),
    UnknownImage { instance: InstanceId, image: ImageId },
    UnknownCategory { instance: InstanceId, category: CategoryId },
    DegenerateBbox { instance: InstanceId },
    BboxOutOfBounds { instance: InstanceId },
    MissingGeometry { instance: InstanceId },
    MaskSizeMismatch { instance: InstanceId },
    UnsplitImage(ImageId),
    SplitForUnknownImage(ImageId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateImageId(id) => write!(f, "duplicate image id {id}"),
            Violation::DuplicateCategoryId(id) => write!(f, "duplicate category id {id}"),
            Violation::DuplicateInstanceId(id) => write!(f, "duplicate instance id {id}"),
            Violation::EmptyImage(id) => write!(f, "image {id} has a zero dimension"),
            Violation::UnknownImage { instance, image } => {
                write!(f, "instance {instance} references unknown image {image}")
            }
            Violation::UnknownCategory { instance, category } => {
                write!(f, "instance {instance} references unknown category {category}")
            }
            Violation::DegenerateBbox { instance } => {
                write!(f, "instance {instance} has a bbox with non-positive extent")
            }
            Violation::BboxOutOfBounds { instance } => {
                write!(f, "instance {instance} bbox exceeds image bounds")
            }
            Violation::MissingGeometry { instance } => {
                write!(f, "instance {instance} has neither bbox nor mask")
            }
            Violation::MaskSizeMismatch { instance } => {
                write!(f, "instance {instance} mask raster does not match image size")
            }
            Violation::UnsplitImage(id) => write!(f, "image {id} is not assigned to a split"),
            Violation::SplitForUnknownImage(id) => write!(f, "split entry for unknown image {id}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed annotation file {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("cannot decode mask raster {path}: {message}")]
    Raster { path: PathBuf, message: String },
    #[error("no recognized annotation layout in {0}")]
    UnrecognizedLayout(PathBuf),
    #[error("schema violation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Schema(Vec<Violation>),
    #[error("instance {0} has an empty mask")]
    EmptyMask(InstanceId),
    #[error("instance {0} has no mask geometry to derive a bbox from")]
    MissingMask(InstanceId),
    #[error("split ratios must each lie in (0, 1) and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("predefined split map does not cover image {0}")]
    IncompleteSplitMap(ImageId),
}

/// Check every store invariant. An empty list means the store is valid.
///
/// Missing bboxes are tolerated when a mask is present (pending derivation). Split
/// coverage is only checked once a split map exists.
pub fn validate(store: &AnnotationStore) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut seen = HashSet::new();
    for im in &store.images {
        if !seen.insert(im.id) {
            out.push(Violation::DuplicateImageId(im.id));
        }
        if im.width == 0 || im.height == 0 {
            out.push(Violation::EmptyImage(im.id));
        }
    }
    let mut cats = HashSet::new();
    for c in &store.categories {
        if !cats.insert(c.id) {
            out.push(Violation::DuplicateCategoryId(c.id));
        }
    }

    let mut inst_ids = HashSet::new();
    for inst in &store.instances {
        if !inst_ids.insert(inst.id) {
            out.push(Violation::DuplicateInstanceId(inst.id));
        }
        let image = store.image(inst.image_id);
        if image.is_none() {
            out.push(Violation::UnknownImage { instance: inst.id, image: inst.image_id });
        }
        if !cats.contains(&inst.category_id) {
            out.push(Violation::UnknownCategory { instance: inst.id, category: inst.category_id });
        }
        if inst.bbox.is_none() && inst.mask.is_none() {
            out.push(Violation::MissingGeometry { instance: inst.id });
        }
        if let Some(b) = &inst.bbox {
            if !b.is_valid() {
                out.push(Violation::DegenerateBbox { instance: inst.id });
            } else if let Some(im) = image {
                let frame = BBox::new(0.0, 0.0, im.width as f64, im.height as f64);
                if !frame.contains_box(b) {
                    out.push(Violation::BboxOutOfBounds { instance: inst.id });
                }
            }
        }
        if let (Some(MaskGeometry::Rle(rle)), Some(im)) = (&inst.mask, image) {
            if rle.size != [im.height, im.width] || rle.decode().is_none() {
                out.push(Violation::MaskSizeMismatch { instance: inst.id });
            }
        }
    }

    if !store.splits.is_empty() {
        let ids: BTreeSet<_> = store.images.iter().map(|im| im.id).collect();
        for id in &ids {
            if !store.splits.contains_key(id) {
                out.push(Violation::UnsplitImage(*id));
            }
        }
        for id in store.splits.keys() {
            if !ids.contains(id) {
                out.push(Violation::SplitForUnknownImage(*id));
            }
        }
    }
    out
}

/// Fill missing bboxes with the tight extent of each instance's mask foreground.
/// Instances that already carry a bbox are left untouched.
pub fn derive_bboxes(store: &AnnotationStore) -> Result<AnnotationStore, DatasetError> {
    let mut out = store.clone();
    for inst in out.instances.iter_mut().filter(|i| i.bbox.is_none()) {
        let geom = inst.mask.as_ref().ok_or(DatasetError::MissingMask(inst.id))?;
        let im = store
            .image(inst.image_id)
            .ok_or_else(|| DatasetError::Schema(vec![Violation::UnknownImage {
                instance: inst.id,
                image: inst.image_id,
            }]))?;
        let raster = geom
            .rasterize(im.width as usize, im.height as usize)
            .ok_or(DatasetError::Schema(vec![Violation::MaskSizeMismatch { instance: inst.id }]))?;
        inst.bbox = Some(raster.tight_bbox().ok_or(DatasetError::EmptyMask(inst.id))?);
    }
    Ok(out)
}
