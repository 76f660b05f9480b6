//! Cluster proposals from foreground regions, verified against fruit-level
//! evidence (Output A), next to the plain region-to-box baseline (Output B).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AnnotationStore, CategoryId, ImageId};
use crate::geometry::BBox;
use crate::mask::BinaryMask;
use crate::metrics::{map_report, DetMetrics, MetricsError, PredictionRecord};

/// One patch worth of pixels; smaller components are treated as speckle.
pub const MIN_COMPONENT_AREA: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("invalid verification config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceSource {
    Detector,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fruit {
    pub center: (f64, f64),
    pub area: f64,
    pub diameter: f64,
    /// Box or component extent, used when shrinking accepted clusters.
    pub extent: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FruitEvidence {
    pub source: EvidenceSource,
    pub fruits: Vec<Fruit>,
}

impl FruitEvidence {
    /// Detector boxes; diameter is the mean side length.
    pub fn from_boxes(boxes: &[BBox]) -> Self {
        let fruits = boxes
            .iter()
            .filter(|b| b.is_valid())
            .map(|b| Fruit { center: b.center(), area: b.area(), diameter: 0.5 * (b.w + b.h), extent: *b })
            .collect();
        Self { source: EvidenceSource::Detector, fruits }
    }

    /// Connected components of a fruit mask; diameter of the equal-area disk.
    pub fn from_mask(mask: &BinaryMask, min_area: usize) -> Self {
        let fruits = components(mask)
            .into_iter()
            .filter(|c| c.area >= min_area)
            .map(|c| {
                let area = c.area as f64;
                Fruit {
                    center: c.centroid,
                    area,
                    diameter: area.sqrt() * (4.0 / std::f64::consts::PI).sqrt(),
                    extent: c.bbox,
                }
            })
            .collect();
        Self { source: EvidenceSource::Segmentation, fruits }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub min_fruits: usize,
    pub compact: f64,
    /// Link radius as a multiple of the mean member diameter.
    pub rho: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { min_fruits: 2, compact: 0.6, rho: 2.0 }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.min_fruits < 2 {
            return Err(ClusterError::InvalidConfig("a cluster needs at least two fruits".into()));
        }
        if !(self.compact >= 0.0 && self.compact.is_finite()) || !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(ClusterError::InvalidConfig("thresholds must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    InsufficientMembers,
    Disconnected,
    NotCompact,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rejection::InsufficientMembers => "insufficient members",
            Rejection::Disconnected => "disconnected",
            Rejection::NotCompact => "not compact",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected(Rejection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProposal {
    pub roi: BBox,
    pub members: Vec<usize>,
    /// Mean pairwise centre distance over the roi diagonal; 0 with fewer than two members.
    pub compactness: f64,
    pub connected: bool,
    pub verdict: Verdict,
}

impl ClusterProposal {
    pub fn is_accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub bbox: BBox,
    pub area: usize,
    /// Mean of pixel centres.
    pub centroid: (f64, f64),
}

/// 8-connected foreground components in raster-scan order of their first pixel.
pub fn components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || !mask.as_slice()[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let (mut area, mut sx, mut sy) = (0usize, 0.0, 0.0);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            area += 1;
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let q = ny * w + nx;
                    if !seen[q] && mask.as_slice()[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(Component {
            bbox: BBox::from_xyxy(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64),
            area,
            centroid: (sx / area as f64, sy / area as f64),
        });
    }
    out
}

/// Output B: one tight box per component of at least `min_area` pixels.
pub fn region_to_boxes(mask: &BinaryMask, min_area: usize) -> Vec<BBox> {
    components(mask).into_iter().filter(|c| c.area >= min_area).map(|c| c.bbox).collect()
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

fn is_connected(centers: &[(f64, f64)], radius: f64) -> bool {
    if centers.is_empty() {
        return false;
    }
    let mut reached = vec![false; centers.len()];
    reached[0] = true;
    let mut stack = vec![0];
    while let Some(i) = stack.pop() {
        for j in 0..centers.len() {
            if !reached[j] && dist(centers[i], centers[j]) <= radius {
                reached[j] = true;
                stack.push(j);
            }
        }
    }
    reached.iter().all(|&r| r)
}

/// Check one roi against the fruit evidence. Predicates are tested in the order
/// member count, connectivity, compactness; the first failure is the reason.
pub fn verify(roi: &BBox, evidence: &FruitEvidence, cfg: &VerifyConfig) -> ClusterProposal {
    let members: Vec<usize> = (0..evidence.fruits.len())
        .filter(|&i| {
            let (cx, cy) = evidence.fruits[i].center;
            roi.contains_point(cx, cy)
        })
        .collect();
    let centers: Vec<(f64, f64)> = members.iter().map(|&i| evidence.fruits[i].center).collect();
    let n = centers.len();

    let compactness = if n < 2 {
        0.0
    } else {
        let mut sum = 0.0;
        for a in 0..n {
            for b in a + 1..n {
                sum += dist(centers[a], centers[b]);
            }
        }
        let mean = sum / (n * (n - 1) / 2) as f64;
        let diag = roi.diagonal();
        if diag > 0.0 { mean / diag } else { 0.0 }
    };
    let mean_diameter = if n == 0 {
        0.0
    } else {
        members.iter().map(|&i| evidence.fruits[i].diameter).sum::<f64>() / n as f64
    };
    let connected = is_connected(&centers, cfg.rho * mean_diameter);

    let verdict = if n < cfg.min_fruits {
        Verdict::Rejected(Rejection::InsufficientMembers)
    } else if !connected {
        Verdict::Rejected(Rejection::Disconnected)
    } else if compactness > cfg.compact {
        Verdict::Rejected(Rejection::NotCompact)
    } else {
        Verdict::Accepted
    };
    ClusterProposal { roi: *roi, members, compactness, connected, verdict }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Accepted clusters shrunk to the extent of their member fruits.
    pub accepted: Vec<BBox>,
    /// Every proposal with its verdict, in component order.
    pub proposals: Vec<ClusterProposal>,
}

/// Output A: region proposals, verification, then shrink to member extent.
pub fn pipeline_a(mask: &BinaryMask, evidence: &FruitEvidence, cfg: &VerifyConfig) -> PipelineOutput {
    let proposals: Vec<ClusterProposal> =
        region_to_boxes(mask, MIN_COMPONENT_AREA).iter().map(|roi| verify(roi, evidence, cfg)).collect();
    let accepted = proposals
        .iter()
        .filter(|p| p.is_accepted())
        .map(|p| {
            p.members
                .iter()
                .map(|&i| evidence.fruits[i].extent)
                .reduce(|a, b| a.union(&b))
                .expect("accepted proposals have members")
        })
        .collect();
    PipelineOutput { accepted, proposals }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub output_a: DetMetrics,
    pub output_b: DetMetrics,
}

fn as_records(boxes: &BTreeMap<ImageId, Vec<BBox>>, category_id: CategoryId) -> Vec<PredictionRecord> {
    boxes
        .iter()
        .flat_map(|(&image_id, v)| {
            v.iter().map(move |&bbox| PredictionRecord { image_id, category_id, bbox, score: 1.0 })
        })
        .collect()
}

/// Score both outputs against cluster annotations. Cluster boxes carry no
/// confidence, so every box scores 1.0 and ties keep input order.
pub fn compare_ab(
    a: &BTreeMap<ImageId, Vec<BBox>>,
    b: &BTreeMap<ImageId, Vec<BBox>>,
    gt: &AnnotationStore,
    category_id: CategoryId,
) -> Result<ComparisonReport, ClusterError> {
    let output_a = map_report(&as_records(a, category_id), gt, 0.0)?.metrics;
    let output_b = map_report(&as_records(b, category_id), gt, 0.0)?.metrics;
    Ok(ComparisonReport { output_a, output_b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn disk_boxes(centers: &[(f64, f64)], d: f64) -> Vec<BBox> {
        centers.iter().map(|&(x, y)| BBox::from_center(x, y, d, d)).collect()
    }

    #[test]
    fn empty_mask_has_no_regions() {
        assert!(region_to_boxes(&BinaryMask::new(20, 20), 1).is_empty());
    }

    #[test]
    fn two_blobs_two_boxes() {
        let mut m = BinaryMask::new(40, 30);
        m.fill_box(&BBox::new(2.0, 3.0, 5.0, 4.0));
        m.fill_box(&BBox::new(20.0, 10.0, 8.0, 9.0));
        assert_eq!(region_to_boxes(&m, 1), vec![BBox::new(2.0, 3.0, 5.0, 4.0), BBox::new(20.0, 10.0, 8.0, 9.0)]);
        assert_eq!(region_to_boxes(&m, 21), vec![BBox::new(20.0, 10.0, 8.0, 9.0)]);
    }

    #[test]
    fn u_shape_is_one_component() {
        let m = BinaryMask::from_fn(30, 20, |x, y| {
            (2..28).contains(&x) && (3..18).contains(&y) && !((8..22).contains(&x) && y < 13)
        });
        assert_eq!(region_to_boxes(&m, 1), vec![BBox::new(2.0, 3.0, 26.0, 15.0)]);
    }

    #[test]
    fn diagonal_touch_connects() {
        let m = BinaryMask::from_fn(4, 4, |x, y| x == y);
        assert_eq!(components(&m).len(), 1);
    }

    #[test]
    fn single_fruit_rejected() {
        let ev = FruitEvidence::from_boxes(&disk_boxes(&[(50.0, 50.0)], 20.0));
        let p = verify(&BBox::new(0.0, 0.0, 100.0, 100.0), &ev, &VerifyConfig::default());
        assert_eq!(p.verdict, Verdict::Rejected(Rejection::InsufficientMembers));
        assert_eq!(Rejection::InsufficientMembers.to_string(), "insufficient members");
    }

    #[test]
    fn packed_five_accepted() {
        // quincunx in a 60×60 roi: corners at (10,10)…(50,50), centre (30,30)
        let centers = [(10.0, 10.0), (50.0, 10.0), (30.0, 30.0), (10.0, 50.0), (50.0, 50.0)];
        let ev = FruitEvidence::from_boxes(&disk_boxes(&centers, 20.0));
        let p = verify(&BBox::new(0.0, 0.0, 60.0, 60.0), &ev, &VerifyConfig::default());
        // pairwise: 4 sides of 40, 2 diagonals of 56.57, 4 centre links of 28.28
        let mean = (4.0 * 40.0 + 2.0 * 3200f64.sqrt() + 4.0 * 800f64.sqrt()) / 10.0;
        assert!((p.compactness - mean / 7200f64.sqrt()).abs() < 1e-12);
        assert!(p.connected);
        assert_eq!(p.verdict, Verdict::Accepted);
    }

    #[test]
    fn opposite_corners_disconnected() {
        let ev = FruitEvidence::from_boxes(&disk_boxes(&[(0.0, 0.0), (399.99, 399.99)], 20.0));
        let p = verify(&BBox::new(0.0, 0.0, 400.0, 400.0), &ev, &VerifyConfig::default());
        assert!(!p.connected);
        assert_eq!(p.verdict, Verdict::Rejected(Rejection::Disconnected));
    }

    #[test]
    fn mask_evidence_diameter() {
        let mut m = BinaryMask::new(40, 40);
        m.fill_box(&BBox::new(5.0, 5.0, 20.0, 20.0));
        let ev = FruitEvidence::from_mask(&m, 1);
        assert_eq!(ev.fruits.len(), 1);
        assert!((ev.fruits[0].diameter - 20.0 * (4.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert_eq!(ev.fruits[0].center, (15.0, 15.0));
    }

    #[test]
    fn pipeline_on_background_is_empty() {
        let out = pipeline_a(&BinaryMask::new(64, 64), &FruitEvidence::from_boxes(&[]), &VerifyConfig::default());
        assert!(out.accepted.is_empty() && out.proposals.is_empty());
    }

    #[test]
    fn config_requires_two_fruits() {
        assert!(VerifyConfig { min_fruits: 1, ..Default::default() }.validate().is_err());
        assert!(VerifyConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn looser_thresholds_keep_acceptance(
            pts in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64), 0..8),
            d in 5.0..30.0f64,
            compact in 0.1..0.8f64,
            rho in 0.5..3.0f64,
            dc in 0.0..0.5f64,
            dr in 0.0..2.0f64,
        ) {
            let ev = FruitEvidence::from_boxes(&disk_boxes(&pts, d));
            let roi = BBox::new(0.0, 0.0, 100.0, 100.0);
            let tight = verify(&roi, &ev, &VerifyConfig { min_fruits: 2, compact, rho });
            let loose = verify(&roi, &ev, &VerifyConfig { min_fruits: 2, compact: compact + dc, rho: rho + dr });
            if tight.is_accepted() {
                prop_assert!(loose.is_accepted());
            }
            if loose.is_accepted() {
                prop_assert!(loose.members.len() >= 2 && loose.connected && loose.compactness <= compact + dc);
            }
        }
    }
}
