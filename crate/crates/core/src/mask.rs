//! Binary rasters plus the two mask geometries stored in annotation files:
//! vector polygons and uncompressed COCO run-length encoding.

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Row-major binary raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask buffer size");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// In-place union with a mask of identical size.
    pub fn union_with(&mut self, other: &BinaryMask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn fill_box(&mut self, b: &BBox) {
        let x1 = b.x.floor().max(0.0) as usize;
        let y1 = b.y.floor().max(0.0) as usize;
        let x2 = (b.x2().ceil().max(0.0) as usize).min(self.width);
        let y2 = (b.y2().ceil().max(0.0) as usize).min(self.height);
        for y in y1..y2 {
            for x in x1..x2 {
                self.set(x, y, true);
            }
        }
    }

    /// Tight half-open extent of the foreground, `None` when empty.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1 != usize::MAX).then(|| BBox::from_xyxy(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }

    pub fn hflip(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Nearest-neighbour resample to a new size.
    pub fn resize_nearest(&self, width: usize, height: usize) -> BinaryMask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        BinaryMask::from_fn(width, height, |x, y| {
            let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            self.get(sx, sy)
        })
    }
}

/// Uncompressed COCO RLE: runs alternate background/foreground starting with
/// background, walking the raster in column-major order. `size` is `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..mask.width() {
            for y in 0..mask.height() {
                let v = mask.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [mask.height() as u32, mask.width() as u32], counts }
    }

    /// Returns `None` when the run lengths do not cover the raster exactly.
    pub fn decode(&self) -> Option<BinaryMask> {
        let (h, w) = (self.size[0] as usize, self.size[1] as usize);
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (h * w) as u64 {
            return None;
        }
        let mut mask = BinaryMask::new(w, h);
        let mut pos = 0usize;
        let mut value = false;
        for &run in &self.counts {
            for _ in 0..run {
                if value {
                    mask.set(pos / h, pos % h, true);
                }
                pos += 1;
            }
            value = !value;
        }
        Some(mask)
    }
}

/// Mask geometry attached to an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskGeometry {
    /// One or more rings, each a flat `[x0, y0, x1, y1, ...]` vertex list.
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

impl MaskGeometry {
    /// Rasterize at the given image size. Polygon pixels are those whose centre
    /// lies inside any ring (even-odd rule per ring).
    pub fn rasterize(&self, width: usize, height: usize) -> Option<BinaryMask> {
        match self {
            MaskGeometry::Polygons(rings) => {
                let mut mask = BinaryMask::new(width, height);
                for ring in rings {
                    fill_polygon(&mut mask, ring);
                }
                Some(mask)
            }
            MaskGeometry::Rle(rle) => {
                let m = rle.decode()?;
                (m.width() == width && m.height() == height).then_some(m)
            }
        }
    }

    pub fn hflip(&self, width: f64) -> MaskGeometry {
        match self {
            MaskGeometry::Polygons(rings) => MaskGeometry::Polygons(
                rings
                    .iter()
                    .map(|r| {
                        r.chunks_exact(2).flat_map(|p| [width - p[0], p[1]]).collect()
                    })
                    .collect(),
            ),
            MaskGeometry::Rle(rle) => match rle.decode() {
                Some(m) => MaskGeometry::Rle(Rle::encode(&m.hflip())),
                None => self.clone(),
            },
        }
    }
}

fn fill_polygon(mask: &mut BinaryMask, ring: &[f64]) {
    let pts: Vec<(f64, f64)> = ring.chunks_exact(2).map(|p| (p[0], p[1])).collect();
    if pts.len() < 3 {
        return;
    }
    let mut crossings = Vec::new();
    for y in 0..mask.height() {
        let sy = y as f64 + 0.5;
        crossings.clear();
        for i in 0..pts.len() {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            if (y0 <= sy && y1 > sy) || (y1 <= sy && y0 > sy) {
                crossings.push(x0 + (sy - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            // pixel centres x + 0.5 in [a, b)
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(mask.width());
            for x in start..end {
                mask.set(x, y, true);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn axis_aligned_polygon_covers_expected_pixels() {
        let poly = MaskGeometry::Polygons(vec![vec![3.0, 2.0, 8.0, 2.0, 8.0, 6.0, 3.0, 6.0]]);
        let m = poly.rasterize(12, 10).unwrap();
        assert_eq!(m.count(), 5 * 4);
        assert_eq!(m.tight_bbox(), Some(BBox::new(3.0, 2.0, 5.0, 4.0)));
    }

    #[test]
    fn rle_size_mismatch_rejected() {
        let m = BinaryMask::new(4, 3);
        let rle = Rle::encode(&m);
        assert!(MaskGeometry::Rle(rle.clone()).rasterize(3, 4).is_none());
        let bad = Rle { size: [3, 4], counts: vec![5] };
        assert!(bad.decode().is_none());
    }

    #[test]
    fn rle_is_column_major() {
        let mut m = BinaryMask::new(2, 2);
        m.set(1, 0, true);
        // column 0: (0,0),(0,1) background; column 1: (1,0) fg, (1,1) bg
        assert_eq!(Rle::encode(&m).counts, vec![2, 1, 1]);
    }

    proptest! {
        #[test]
        fn rle_roundtrip(w in 1usize..12, h in 1usize..12, bits in proptest::collection::vec(any::<bool>(), 144)) {
            let m = BinaryMask::from_fn(w, h, |x, y| bits[y * 12 + x]);
            prop_assert_eq!(Rle::encode(&m).decode().unwrap(), m);
        }
    }
}
