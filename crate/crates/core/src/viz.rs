//! Diagnostic artifacts: PCA colour maps of patch features, prediction
//! overlays and metric tables.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageId;
use crate::encoder::PatchFeatureMap;
use crate::geometry::BBox;
use crate::mask::BinaryMask;
use crate::metrics::MetricReport;

pub const GT_RGB: [u8; 3] = [0, 200, 0];
pub const PRED_RGB: [u8; 3] = [220, 0, 0];
pub const OVERLAP_RGB: [u8; 3] = [240, 220, 0];
pub const LEGEND_HEIGHT: u32 = 12;

#[derive(Debug, Error)]
pub enum VizError {
    #[error("PCA needs at least 4 patch vectors, got {0}")]
    TooFewVectors(usize),
    /// Every patch vector is identical. The fallback renders uniform gray.
    #[error("patch features have zero variance")]
    ZeroVariance { fallback: Box<PcaModel> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("overlay size {got:?} does not match image size {expected:?}")]
    SizeMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("reports have inconsistent columns: {0:?} vs {1:?}")]
    InconsistentColumns(Vec<String>, Vec<String>),
    #[error("no reports to tabulate")]
    NoReports,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Unit-norm, mutually orthogonal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Share of total variance per component, non-increasing.
    pub explained: Vec<f64>,
    /// Set on the zero-variance fallback.
    pub fallback: bool,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v.iter().zip(&self.mean)).map(|(a, (x, m))| a * (x - m)).sum())
            .collect()
    }
}

/// Optional restriction of the pooled patches, by image and patch `(i, j)`.
pub type PatchFilter<'a> = &'a dyn Fn(ImageId, usize, usize) -> bool;

/// Top-3 principal components of the patch vectors pooled over `maps`.
pub fn fit_pca(maps: &[PatchFeatureMap], filter: Option<PatchFilter>) -> Result<PcaModel, VizError> {
    fit_pca_k(maps, 3, filter)
}

/// As [`fit_pca`] with `k` components (capped at the channel count).
pub fn fit_pca_k(maps: &[PatchFeatureMap], k: usize, filter: Option<PatchFilter>) -> Result<PcaModel, VizError> {
    let Some(first) = maps.first() else {
        return Err(VizError::TooFewVectors(0));
    };
    let c = first.channels;
    if let Some(m) = maps.iter().find(|m| m.channels != c) {
        return Err(VizError::DimensionMismatch(format!("{} channels, expected {c}", m.channels)));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for m in maps {
        for i in 0..m.grid_h {
            for j in 0..m.grid_w {
                if filter.is_none_or(|f| f(m.image_id, i, j)) {
                    rows.push(m.patch(i, j).into_iter().map(f64::from).collect());
                }
            }
        }
    }
    let n = rows.len();
    if n < 4 {
        return Err(VizError::TooFewVectors(n));
    }
    let mut mean = vec![0.0; c];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, c, |r, col| rows[r][col] - mean[col]);
    let cov = centered.transpose() * &centered / n as f64;
    let k = k.min(c);
    let total: f64 = cov.trace();
    let scale = 1.0 + mean.iter().map(|m| m * m).sum::<f64>();
    if total <= 1e-12 * scale {
        let components = (0..k).map(|a| (0..c).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect();
        let fallback = PcaModel { mean, components, explained: vec![0.0; k], fallback: true };
        return Err(VizError::ZeroVariance { fallback: Box::new(fallback) });
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let lead = (0..c).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        v.iter_mut().for_each(|x| *x *= sign / norm);
        components.push(v);
        explained.push((eig.eigenvalues[idx].max(0.0) / total).min(1.0));
    }
    Ok(PcaModel { mean, components, explained, fallback: false })
}

/// Per-patch colours in `[0, 1]`, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchColors {
    pub grid_h: usize,
    pub grid_w: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl PatchColors {
    /// Raster with each patch drawn as a `scale`×`scale` block.
    pub fn to_image(&self, scale: u32) -> RgbImage {
        RgbImage::from_fn(self.grid_w as u32 * scale, self.grid_h as u32 * scale, |x, y| {
            let p = self.pixels[(y / scale) as usize * self.grid_w + (x / scale) as usize];
            Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }
}

/// Project every patch onto the model's components, min-max normalized per channel
/// over this map. Constant channels, and channels without a component, are 0.5.
pub fn project_rgb(map: &PatchFeatureMap, model: &PcaModel) -> Result<PatchColors, VizError> {
    if map.channels != model.dim() {
        return Err(VizError::DimensionMismatch(format!("map has {} channels, model {}", map.channels, model.dim())));
    }
    let proj: Vec<Vec<f64>> = (0..map.grid_h)
        .flat_map(|i| (0..map.grid_w).map(move |j| (i, j)))
        .map(|(i, j)| model.project(&map.patch(i, j).into_iter().map(f64::from).collect::<Vec<_>>()))
        .collect();
    let mut pixels = vec![[0.5; 3]; proj.len()];
    for ch in 0..model.components.len().min(3) {
        let lo = proj.iter().map(|p| p[ch]).fold(f64::INFINITY, f64::min);
        let hi = proj.iter().map(|p| p[ch]).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-12 * (1.0 + hi.abs().max(lo.abs())) {
            for (px, p) in pixels.iter_mut().zip(&proj) {
                px[ch] = (p[ch] - lo) / (hi - lo);
            }
        }
    }
    Ok(PatchColors { grid_h: map.grid_h, grid_w: map.grid_w, pixels })
}

pub enum Overlay<'a> {
    Boxes { pred: &'a [BBox], gt: &'a [BBox] },
    Masks { pred: Option<&'a BinaryMask>, gt: Option<&'a BinaryMask> },
}

fn blend(base: Rgb<u8>, c: [u8; 3]) -> Rgb<u8> {
    Rgb([0, 1, 2].map(|i| ((base.0[i] as u16 + c[i] as u16) / 2) as u8))
}

fn outline(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = b.x.floor() as i64;
    let y0 = b.y.floor() as i64;
    let x1 = b.x2().ceil() as i64 - 1;
    let y1 = b.y2().ceil() as i64 - 1;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

/// Annotated copy of `image` with a legend strip of GT, prediction and overlap
/// swatches appended below. Boxes are drawn as 1 px outlines, GT first; masks are
/// blended half-and-half with the image.
pub fn render_overlay(image: &RgbImage, overlay: &Overlay) -> Result<RgbImage, VizError> {
    let (w, h) = image.dimensions();
    let mut out = RgbImage::from_pixel(w, h + LEGEND_HEIGHT, Rgb([255, 255, 255]));
    image::imageops::replace(&mut out, image, 0, 0);
    match overlay {
        Overlay::Boxes { pred, gt } => {
            for b in gt.iter() {
                outline(&mut out, b, GT_RGB);
            }
            for b in pred.iter() {
                outline(&mut out, b, PRED_RGB);
            }
        }
        Overlay::Masks { pred, gt } => {
            for m in pred.iter().chain(gt.iter()) {
                if (m.width() as u32, m.height() as u32) != (w, h) {
                    return Err(VizError::SizeMismatch { expected: (w, h), got: (m.width() as u32, m.height() as u32) });
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let p = pred.is_some_and(|m| m.get(x as usize, y as usize));
                    let g = gt.is_some_and(|m| m.get(x as usize, y as usize));
                    let color = match (p, g) {
                        (true, true) => OVERLAP_RGB,
                        (true, false) => PRED_RGB,
                        (false, true) => GT_RGB,
                        (false, false) => continue,
                    };
                    out.put_pixel(x, y, blend(*image.get_pixel(x, y), color));
                }
            }
        }
    }
    let swatch = LEGEND_HEIGHT - 4;
    for (k, color) in [GT_RGB, PRED_RGB, OVERLAP_RGB].into_iter().enumerate() {
        let x0 = 2 + k as u32 * (swatch + 4);
        for y in h + 2..h + 2 + swatch {
            for x in x0..(x0 + swatch).min(w) {
                out.put_pixel(x, y, Rgb(color));
            }
        }
    }
    Ok(out)
}

/// Rendered metric tables. `best[r][c]` marks the column maxima (ties all marked).
#[derive(Debug, Clone, PartialEq)]
pub struct Tables {
    pub columns: Vec<String>,
    pub best: Vec<Vec<bool>>,
    pub csv: String,
    pub text: String,
}

/// One row per report; every metric is higher-is-better, so the column maximum is marked.
pub fn emit_tables(reports: &[MetricReport]) -> Result<Tables, VizError> {
    let Some(first) = reports.first() else {
        return Err(VizError::NoReports);
    };
    let names = |r: &MetricReport| r.metrics.columns().iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>();
    let columns = names(first);
    for r in reports {
        let cols = names(r);
        if cols != columns {
            return Err(VizError::InconsistentColumns(columns, cols));
        }
    }
    let values: Vec<Vec<f64>> =
        reports.iter().map(|r| r.metrics.columns().into_iter().map(|(_, v)| v).collect()).collect();
    let maxima: Vec<f64> =
        (0..columns.len()).map(|c| values.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let best: Vec<Vec<bool>> = values.iter().map(|r| r.iter().zip(&maxima).map(|(v, m)| v == m).collect()).collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset".to_string(), "model".to_string()];
    header.extend(columns.iter().cloned());
    header.push("best".into());
    w.write_record(&header)?;
    for ((r, vals), marks) in reports.iter().zip(&values).zip(&best) {
        let mut rec = vec![r.dataset.clone(), r.model.clone()];
        rec.extend(vals.iter().map(|v| format!("{v:.3}")));
        let won: Vec<&str> = columns.iter().zip(marks).filter(|(_, b)| **b).map(|(c, _)| c.as_str()).collect();
        rec.push(won.join(";"));
        w.write_record(&rec)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8");

    let cells: Vec<Vec<String>> = std::iter::once(header[..header.len() - 1].to_vec())
        .chain(reports.iter().zip(&values).zip(&best).map(|((r, vals), marks)| {
            let mut row = vec![r.dataset.clone(), r.model.clone()];
            row.extend(vals.iter().zip(marks).map(|(v, b)| format!("{v:.3}{}", if *b { "*" } else { "" })));
            row
        }))
        .collect();
    let widths: Vec<usize> = (0..cells[0].len()).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut text = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        writeln!(text, "{}", line.join("  ").trim_end()).unwrap();
        if i == 0 {
            writeln!(text, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).unwrap();
        }
    }
    Ok(Tables { columns, best, csv, text })
}

/// Write `metrics.csv` and `metrics.txt` into `dir`.
pub fn write_tables(reports: &[MetricReport], dir: &Path) -> Result<Tables, VizError> {
    let t = emit_tables(reports)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), &t.csv)?;
    std::fs::write(dir.join("metrics.txt"), &t.text)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{DetMetrics, Metrics, SegMetrics};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_from_rows(rows: &[Vec<f32>], grid_w: usize) -> PatchFeatureMap {
        let c = rows[0].len();
        let gh = rows.len() / grid_w;
        let mut data = vec![0f32; c * rows.len()];
        for (p, r) in rows.iter().enumerate() {
            for (ch, v) in r.iter().enumerate() {
                data[ch * rows.len() + p] = *v;
            }
        }
        PatchFeatureMap::new(1, c, gh, grid_w, data).unwrap()
    }

    fn seg(dataset: &str, model: &str, miou: f64) -> MetricReport {
        MetricReport {
            dataset: dataset.into(),
            model: model.into(),
            metrics: Metrics::Seg(SegMetrics { miou, dice: 80.0, precision: 70.0, recall: 60.0 }),
        }
    }

    #[test]
    fn too_few_vectors() {
        let m = map_from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0], vec![3.0, 3.0]], 3);
        assert!(matches!(fit_pca(&[m], None), Err(VizError::TooFewVectors(3))));
    }

    #[test]
    fn identical_vectors_fall_back_to_gray() {
        let m = map_from_rows(&vec![vec![0.1, -2.0, 7.0, 0.3]; 6], 3);
        let Err(VizError::ZeroVariance { fallback }) = fit_pca(std::slice::from_ref(&m), None) else {
            panic!("expected zero variance")
        };
        assert!(fallback.fallback);
        let img = project_rgb(&m, &fallback).unwrap();
        assert!(img.pixels.iter().all(|p| *p == [0.5; 3]));
    }

    #[test]
    fn full_basis_reconstructs_centered_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f32>> = (0..24).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let m = map_from_rows(&rows, 6);
        let model = fit_pca_k(std::slice::from_ref(&m), 5, None).unwrap();
        assert!((model.explained.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for r in &rows {
            let x: Vec<f64> = r.iter().map(|&v| v as f64).collect();
            let coords = model.project(&x);
            for d in 0..5 {
                let back: f64 = coords.iter().zip(&model.components).map(|(a, c)| a * c[d]).sum();
                assert!((back - (x[d] - model.mean[d])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sign_convention_and_filter() {
        let rows: Vec<Vec<f32>> = (0..8).map(|k| vec![k as f32, -(k as f32) * 3.0, 0.5]).collect();
        let m = map_from_rows(&rows, 4);
        let model = fit_pca(std::slice::from_ref(&m), None).unwrap();
        let c0 = &model.components[0];
        assert!(c0[1] > 0.0 && c0[1].abs() >= c0[0].abs());
        // only the first row of patches
        let only_top = |_: ImageId, i: usize, _: usize| i == 0;
        let top = fit_pca(std::slice::from_ref(&m), Some(&only_top)).unwrap();
        assert!((top.mean[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn two_groups_two_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f32>> = (0..16)
            .map(|p| {
                let base = if p % 2 == 0 { 2.0 } else { -2.0 };
                (0..6).map(|c| if c < 3 { base } else { 0.0 } + rng.gen_range(-0.05..0.05)).collect()
            })
            .collect();
        let m = map_from_rows(&rows, 4);
        let model = fit_pca(std::slice::from_ref(&m), None).unwrap();
        let img = project_rgb(&m, &model).unwrap();
        assert!((img.pixels[0][0] - img.pixels[1][0]).abs() > 0.5);
        assert_eq!(img, project_rgb(&m, &model).unwrap());
        assert_eq!(img.to_image(16).dimensions(), (64, 64));
    }

    #[test]
    fn projection_checks_dimension() {
        let m = map_from_rows(&vec![vec![0.0, 1.0, 2.0]; 4], 2);
        let model = PcaModel { mean: vec![0.0; 4], components: vec![], explained: vec![], fallback: true };
        assert!(matches!(project_rgb(&m, &model), Err(VizError::DimensionMismatch(_))));
    }

    #[test]
    fn boxes_drawn_at_exact_pixels() {
        let img = RgbImage::from_pixel(40, 30, Rgb([10, 10, 10]));
        let pred = [BBox::new(2.0, 3.0, 5.0, 4.0), BBox::new(20.0, 10.0, 10.0, 10.0)];
        let out = render_overlay(&img, &Overlay::Boxes { pred: &pred, gt: &[] }).unwrap();
        assert_eq!(out.dimensions(), (40, 30 + LEGEND_HEIGHT));
        for (x, y) in [(2, 3), (6, 3), (2, 6), (6, 6), (20, 10), (29, 19)] {
            assert_eq!(out.get_pixel(x, y).0, PRED_RGB, "({x}, {y})");
        }
        assert_eq!(out.get_pixel(4, 4).0, [10, 10, 10]);
        assert_eq!(out.get_pixel(7, 3).0, [10, 10, 10]);
    }

    #[test]
    fn empty_predictions_show_gt_only() {
        let img = RgbImage::from_pixel(20, 20, Rgb([0, 0, 0]));
        let gt = [BBox::new(1.0, 1.0, 5.0, 5.0)];
        let out = render_overlay(&img, &Overlay::Boxes { pred: &[], gt: &gt }).unwrap();
        let body = image::imageops::crop_imm(&out, 0, 0, 20, 20).to_image();
        assert!(body.pixels().all(|p| p.0 == GT_RGB || p.0 == [0, 0, 0]));
        assert!(body.pixels().any(|p| p.0 == GT_RGB));
    }

    #[test]
    fn exact_mask_is_overlap_only() {
        let img = RgbImage::from_pixel(16, 16, Rgb([100, 100, 100]));
        let m = BinaryMask::from_fn(16, 16, |x, y| x > 3 && y < 9);
        let out = render_overlay(&img, &Overlay::Masks { pred: Some(&m), gt: Some(&m) }).unwrap();
        let overlap = blend(Rgb([100, 100, 100]), OVERLAP_RGB);
        for y in 0..16 {
            for x in 0..16 {
                let want = if m.get(x, y) { overlap } else { Rgb([100, 100, 100]) };
                assert_eq!(*out.get_pixel(x as u32, y as u32), want);
            }
        }
        let bad = BinaryMask::new(8, 16);
        assert!(matches!(
            render_overlay(&img, &Overlay::Masks { pred: Some(&bad), gt: None }),
            Err(VizError::SizeMismatch { .. })
        ));
        assert_eq!(out, render_overlay(&img, &Overlay::Masks { pred: Some(&m), gt: Some(&m) }).unwrap());
    }

    #[test]
    fn two_variant_table() {
        let t = emit_tables(&[seg("orchard", "linear", 61.5), seg("orchard", "patch", 72.25)]).unwrap();
        assert_eq!(t.columns, ["mIoU", "Dice", "P", "R"]);
        assert!(t.best[1][0]);
        assert!(!t.best[0][0]);
        let mut lines = t.csv.lines();
        assert_eq!(lines.next(), Some("dataset,model,mIoU,Dice,P,R,best"));
        assert_eq!(lines.next(), Some("orchard,linear,61.500,80.000,70.000,60.000,Dice;P;R"));
        assert!(t.text.contains("72.250*"));
        assert_eq!(t.text.lines().count(), 4);
    }

    #[test]
    fn single_report_all_best() {
        let t = emit_tables(&[seg("a", "b", 1.0)]).unwrap();
        assert!(t.best[0].iter().all(|&b| b));
    }

    #[test]
    fn mixed_columns_rejected() {
        let det = MetricReport {
            dataset: "a".into(),
            model: "d".into(),
            metrics: Metrics::Det(DetMetrics { map50: 1.0, map: 1.0, precision: 1.0, recall: 1.0, f1: 1.0 }),
        };
        assert!(matches!(emit_tables(&[seg("a", "s", 1.0), det]), Err(VizError::InconsistentColumns(..))));
        assert!(matches!(emit_tables(&[]), Err(VizError::NoReports)));
    }
}
