use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    validate, AnnotationStore, Category, DatasetError, ImageId, ImageRecord, Instance, Split,
};
use crate::geometry::BBox;
use crate::mask::{BinaryMask, MaskGeometry, Rle};

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<ImageRecord>,
    categories: Vec<Category>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    splits: BTreeMap<String, Split>,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segmentation: Option<MaskGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default)]
    iscrowd: u8,
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_owned(), source })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|source| DatasetError::Json { path: path.to_owned(), source })
}

fn from_coco(file: CocoFile) -> AnnotationStore {
    let instances = file
        .annotations
        .into_iter()
        .map(|a| Instance {
            id: a.id,
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox.map(|[x, y, w, h]| BBox::new(x, y, w, h)),
            // an empty polygon list is how some exporters spell "no mask"
            mask: a.segmentation.filter(|s| !matches!(s, MaskGeometry::Polygons(p) if p.is_empty())),
        })
        .collect();
    let splits = file
        .splits
        .into_iter()
        .filter_map(|(k, v)| k.parse::<ImageId>().ok().map(|id| (id, v)))
        .collect();
    AnnotationStore { images: file.images, categories: file.categories, instances, splits }
}

fn checked(store: AnnotationStore) -> Result<AnnotationStore, DatasetError> {
    let violations = validate(&store);
    if violations.is_empty() {
        Ok(store)
    } else {
        Err(DatasetError::Schema(violations))
    }
}

/// Load and validate a COCO-JSON file (with an optional top-level `"splits"` map).
pub fn load_coco(path: &Path) -> Result<AnnotationStore, DatasetError> {
    checked(from_coco(parse_json(path)?))
}

/// Load a dataset directory.
///
/// Recognized layouts, in order:
/// - a path to a `.json` file, or a directory holding `annotations.json` (COCO-JSON);
/// - a directory with `categories.json` and `masks/*.png` label rasters, where every
///   distinct non-zero pixel value is one instance of the first category. Instances from
///   this layout carry RLE masks and no bbox until [`super::derive_bboxes`] runs.
pub fn load_source(path: &Path) -> Result<AnnotationStore, DatasetError> {
    if path.is_file() {
        return load_coco(path);
    }
    let coco = path.join("annotations.json");
    if coco.is_file() {
        return load_coco(&coco);
    }
    let cats = path.join("categories.json");
    let masks = path.join("masks");
    if cats.is_file() && masks.is_dir() {
        return load_mask_layout(path, &cats, &masks);
    }
    Err(DatasetError::UnrecognizedLayout(path.to_owned()))
}

fn load_mask_layout(root: &Path, cats: &Path, masks: &Path) -> Result<AnnotationStore, DatasetError> {
    let categories: Vec<Category> = parse_json(cats)?;
    let category_id = categories
        .first()
        .map(|c| c.id)
        .ok_or_else(|| DatasetError::UnrecognizedLayout(cats.to_owned()))?;
    let io_err = |source| DatasetError::Io { path: masks.to_owned(), source };
    let mut files: Vec<PathBuf> = fs::read_dir(masks)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();

    let mut store = AnnotationStore { categories, ..Default::default() };
    let mut next_instance = 1u64;
    for (idx, file) in files.iter().enumerate() {
        let raster = image::open(file)
            .map_err(|e| DatasetError::Raster { path: file.clone(), message: e.to_string() })?
            .into_luma16();
        let (w, h) = raster.dimensions();
        let image_id = idx as u64 + 1;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
        store.images.push(ImageRecord {
            id: image_id,
            file_name: image_file_for(root, &stem),
            width: w,
            height: h,
        });
        let mut labels: Vec<u16> = raster.pixels().map(|p| p.0[0]).filter(|&v| v != 0).collect();
        labels.sort_unstable();
        labels.dedup();
        for label in labels {
            let m = BinaryMask::from_fn(w as usize, h as usize, |x, y| {
                raster.get_pixel(x as u32, y as u32).0[0] == label
            });
            store.instances.push(Instance {
                id: next_instance,
                image_id,
                category_id,
                bbox: None,
                mask: Some(MaskGeometry::Rle(Rle::encode(&m))),
            });
            next_instance += 1;
        }
    }
    checked(store)
}

fn image_file_for(root: &Path, stem: &str) -> String {
    let dir = root.join("images");
    for ext in ["jpg", "jpeg", "png", "JPG", "PNG"] {
        let name = format!("{stem}.{ext}");
        if dir.join(&name).is_file() {
            return format!("images/{name}");
        }
    }
    format!("{stem}.png")
}

/// Serialize to COCO-JSON text, splits embedded under `"splits"`.
pub fn to_coco_json(store: &AnnotationStore) -> String {
    let annotations = store
        .instances
        .iter()
        .map(|inst| CocoAnnotation {
            id: inst.id,
            image_id: inst.image_id,
            category_id: inst.category_id,
            bbox: inst.bbox.map(|b| b.to_array()),
            segmentation: inst.mask.clone(),
            area: inst.bbox.map(|b| b.area()),
            iscrowd: 0,
        })
        .collect();
    let file = CocoFile {
        images: store.images.clone(),
        categories: store.categories.clone(),
        annotations,
        splits: store.splits.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    };
    serde_json::to_string_pretty(&file).expect("annotation model always serializes")
}

pub fn write_coco(store: &AnnotationStore, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, to_coco_json(store))
        .map_err(|source| DatasetError::Io { path: path.to_owned(), source })
}

/// Read a predefined split manifest: a JSON object mapping image id to split name.
pub fn read_split_map(path: &Path) -> Result<BTreeMap<ImageId, Split>, DatasetError> {
    let raw: BTreeMap<String, Split> = parse_json(path)?;
    Ok(raw.into_iter().filter_map(|(k, v)| k.parse().ok().map(|id| (id, v))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Violation;

    const THREE_IMAGES: &str = r#"{
      "images": [
        {"id": 1, "file_name": "a.jpg", "width": 64, "height": 48},
        {"id": 2, "file_name": "b.jpg", "width": 64, "height": 48},
        {"id": 3, "file_name": "c.jpg", "width": 32, "height": 32}
      ],
      "categories": [{"id": 1, "name": "fruit"}],
      "annotations": [
        {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 10]},
        {"id": 2, "image_id": 1, "category_id": 1, "bbox": [20, 20, 5, 5], "segmentation": [[20, 20, 25, 20, 25, 25, 20, 25]]},
        {"id": 3, "image_id": 2, "category_id": 1, "bbox": [1, 2, 3, 4], "area": 12, "iscrowd": 0},
        {"id": 4, "image_id": 3, "category_id": 1, "bbox": [0, 0, 32, 32]},
        {"id": 5, "image_id": 3, "category_id": 1, "bbox": [4, 4, 4, 4], "segmentation": []}
      ]
    }"#;

    #[test]
    fn load_counts_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("annotations.json");
        fs::write(&p, THREE_IMAGES).unwrap();
        let store = load_source(dir.path()).unwrap();
        assert_eq!((store.images.len(), store.instances.len()), (3, 5));
        assert!(store.instances[4].mask.is_none());

        let out = dir.path().join("out.json");
        write_coco(&store, &out).unwrap();
        assert_eq!(load_coco(&out).unwrap(), store);
    }

    #[test]
    fn out_of_bounds_names_instance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        fs::write(&p, THREE_IMAGES.replace("[1, 2, 3, 4]", "[60, 2, 30, 4]")).unwrap();
        match load_source(&p) {
            Err(DatasetError::Schema(v)) => {
                assert_eq!(v, vec![Violation::BboxOutOfBounds { instance: 3 }]);
                assert!(DatasetError::Schema(v).to_string().contains("instance 3"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn mask_only_layout_leaves_bboxes_pending() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("categories.json"), r#"[{"id": 1, "name": "bruise"}]"#).unwrap();
        fs::create_dir(dir.path().join("masks")).unwrap();
        let mut a = image::GrayImage::new(20, 16);
        for (x, y) in [(2, 3), (3, 3), (10, 10)] {
            a.put_pixel(x, y, image::Luma([1]));
        }
        a.put_pixel(15, 1, image::Luma([2]));
        a.save(dir.path().join("masks/img_a.png")).unwrap();
        let mut b = image::GrayImage::new(8, 8);
        b.put_pixel(4, 4, image::Luma([255]));
        b.save(dir.path().join("masks/img_b.png")).unwrap();

        let store = load_source(dir.path()).unwrap();
        assert_eq!(store.images.len(), 2);
        assert_eq!(store.instances.len(), 3);
        assert!(store.instances.iter().all(|i| i.bbox.is_none() && i.mask.is_some()));

        let derived = crate::dataset::derive_bboxes(&store).unwrap();
        assert_eq!(derived.instances[0].bbox, Some(BBox::new(2.0, 3.0, 9.0, 8.0)));
        assert_eq!(derived.instances[2].bbox, Some(BBox::new(4.0, 4.0, 1.0, 1.0)));
    }

    #[test]
    fn unrecognized_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_source(dir.path()), Err(DatasetError::UnrecognizedLayout(_))));
    }
}
