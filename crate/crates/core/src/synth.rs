//! Synthetic scenes for tests and demos: patch-aligned squares painted in the
//! mock encoder's signal colour on a textured background.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{AnnotationStore, Category, ImageId, ImageRecord, Instance};
use crate::encoder::SIGNAL_RGB;
use crate::geometry::BBox;
use crate::mask::{BinaryMask, MaskGeometry};
use crate::PATCH_SIZE;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Image size in patches `(rows, cols)`.
    pub grid: (usize, usize),
    pub objects: (usize, usize),
    /// Square side in patches, inclusive range.
    pub side: (usize, usize),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { grid: (6, 6), objects: (1, 3), side: (1, 2), seed: 0 }
    }
}

pub struct SyntheticSet {
    pub store: AnnotationStore,
    pub images: Vec<(ImageId, RgbImage)>,
}

fn background(rng: &mut ChaCha8Rng) -> Rgb<u8> {
    // foliage-like tones, far from the signal colour in every channel
    Rgb([rng.gen_range(110..200), rng.gen_range(120..220), rng.gen_range(0..90)])
}

/// `n` images with ids `1..=n`, one category (`1`, "fruit"), polygon masks and boxes.
/// Objects never overlap or touch.
pub fn signal_squares(n: usize, cfg: &SceneConfig) -> SyntheticSet {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (gh, gw) = cfg.grid;
    let p = PATCH_SIZE;
    let mut store = AnnotationStore {
        categories: vec![Category { id: 1, name: "fruit".into() }],
        ..Default::default()
    };
    let mut images = Vec::with_capacity(n);
    let mut next_instance = 1;
    for id in 1..=n as ImageId {
        let (w, h) = ((gw * p) as u32, (gh * p) as u32);
        let mut img = RgbImage::from_fn(w, h, |_, _| background(&mut rng));
        let mut occupied = vec![false; gh * gw];
        let want = rng.gen_range(cfg.objects.0..=cfg.objects.1);
        let mut placed = 0;
        for _ in 0..200 {
            if placed == want {
                break;
            }
            let s = rng.gen_range(cfg.side.0..=cfg.side.1);
            if s > gh || s > gw {
                continue;
            }
            let (i0, j0) = (rng.gen_range(0..=gh - s), rng.gen_range(0..=gw - s));
            // keep a one-patch moat so squares stay separate components
            let blocked = (i0.saturating_sub(1)..(i0 + s + 1).min(gh))
                .any(|i| (j0.saturating_sub(1)..(j0 + s + 1).min(gw)).any(|j| occupied[i * gw + j]));
            if blocked {
                continue;
            }
            for i in i0..i0 + s {
                for j in j0..j0 + s {
                    occupied[i * gw + j] = true;
                }
            }
            let (x0, y0, side) = ((j0 * p) as u32, (i0 * p) as u32, (s * p) as u32);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    img.put_pixel(x, y, Rgb(SIGNAL_RGB));
                }
            }
            let (fx, fy, fs) = (x0 as f64, y0 as f64, side as f64);
            store.instances.push(Instance {
                id: next_instance,
                image_id: id,
                category_id: 1,
                bbox: Some(BBox::new(fx, fy, fs, fs)),
                mask: Some(MaskGeometry::Polygons(vec![vec![fx, fy, fx + fs, fy, fx + fs, fy + fs, fx, fy + fs]])),
            });
            next_instance += 1;
            placed += 1;
        }
        store.images.push(ImageRecord { id, file_name: format!("{id:06}.png"), width: w, height: h });
        images.push((id, img));
    }
    SyntheticSet { store, images }
}

/// One scene of the cluster family: two dense fruit groups plus isolated fruits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterScene {
    pub foreground: BinaryMask,
    pub fruits: Vec<BBox>,
    /// Tight extent of each dense group.
    pub clusters: Vec<BBox>,
    /// Indices into `fruits` of the fruits that belong to no group.
    pub isolated: Vec<usize>,
}

impl ClusterScene {
    /// Cluster annotations for this scene as a one-image store (category `1`, "cluster").
    pub fn cluster_store(&self, image_id: ImageId) -> AnnotationStore {
        let instances = self
            .clusters
            .iter()
            .enumerate()
            .map(|(k, b)| Instance { id: k as u64 + 1, image_id, category_id: 1, bbox: Some(*b), mask: None })
            .collect();
        AnnotationStore {
            categories: vec![Category { id: 1, name: "cluster".into() }],
            images: vec![ImageRecord {
                id: image_id,
                file_name: format!("{image_id:06}.png"),
                width: self.foreground.width() as u32,
                height: self.foreground.height() as u32,
            }],
            instances,
            ..Default::default()
        }
    }
}

fn paint_disk(mask: &mut BinaryMask, b: &BBox) {
    let (cx, cy) = b.center();
    let r2 = (b.w / 2.0).powi(2);
    let (w, h) = (mask.width(), mask.height());
    for y in (b.y.floor().max(0.0) as usize)..(b.y2().ceil() as usize).min(h) {
        for x in (b.x.floor().max(0.0) as usize)..(b.x2().ceil() as usize).min(w) {
            if (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r2 {
                mask.set(x, y, true);
            }
        }
    }
}

/// 320×240 scene: two groups of 2–6 overlapping disks (diameter 20–26 px) and
/// one or two isolated disks kept clear of both groups.
pub fn cluster_scene(seed: u64) -> ClusterScene {
    const W: f64 = 320.0;
    const H: f64 = 240.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fruits = Vec::new();
    let mut clusters = Vec::new();
    for side in 0..2 {
        let d = rng.gen_range(20.0..26.0);
        let step = 0.8 * d;
        let n = rng.gen_range(2..=6usize);
        let cols = if n <= 3 { n } else { 3 };
        let x0 = if side == 0 { rng.gen_range(20.0..60.0) } else { rng.gen_range(200.0..240.0) };
        let y0 = rng.gen_range(20.0..140.0);
        let mut group: Option<BBox> = None;
        for k in 0..n {
            let jitter = (rng.gen_range(-0.1..0.1) * d, rng.gen_range(-0.1..0.1) * d);
            let cx = x0 + d / 2.0 + (k % cols) as f64 * step + jitter.0;
            let cy = y0 + d / 2.0 + (k / cols) as f64 * step + jitter.1;
            let b = BBox::from_center(cx, cy, d, d);
            group = Some(group.map_or(b, |g| g.union(&b)));
            fruits.push(b);
        }
        clusters.push(group.expect("groups are non-empty"));
    }
    let mut isolated = Vec::new();
    let want = rng.gen_range(1..=2usize);
    while isolated.len() < want {
        let d = rng.gen_range(20.0..26.0);
        let b = BBox::from_center(rng.gen_range(d..W - d), rng.gen_range(d..H - d), d, d);
        // clear of every group by more than the default link radius
        let pad = BBox::new(b.x - 60.0, b.y - 60.0, b.w + 120.0, b.h + 120.0);
        let clear = clusters.iter().all(|c| pad.intersection_area(c) == 0.0)
            && isolated.iter().all(|&i| pad.intersection_area(&fruits[i]) == 0.0);
        if clear {
            isolated.push(fruits.len());
            fruits.push(b);
        }
    }
    let mut foreground = BinaryMask::new(W as usize, H as usize);
    for b in &fruits {
        paint_disk(&mut foreground, b);
    }
    ClusterScene { foreground, fruits, clusters, isolated }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate;

    #[test]
    fn scenes_are_valid_and_deterministic() {
        let cfg = SceneConfig { seed: 4, ..Default::default() };
        let a = signal_squares(5, &cfg);
        let b = signal_squares(5, &cfg);
        assert_eq!(a.store, b.store);
        assert!(validate(&a.store).is_empty());
        assert!(a.store.instances.len() >= 5);
        for (id, img) in &a.images {
            let fg = a.store.foreground_mask(*id).unwrap();
            for (x, y, px) in img.enumerate_pixels() {
                assert_eq!(fg.get(x as usize, y as usize), px.0 == SIGNAL_RGB);
            }
        }
    }

    #[test]
    fn cluster_scenes_have_two_groups_and_separate_isolated_fruits() {
        for seed in 0..20 {
            let s = cluster_scene(seed);
            assert_eq!(s.clusters.len(), 2);
            assert!(!s.isolated.is_empty());
            assert_eq!(crate::cluster::region_to_boxes(&s.foreground, 1).len(), 2 + s.isolated.len());
        }
    }
}
