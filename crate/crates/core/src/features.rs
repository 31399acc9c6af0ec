//! Feature providers: map boxes of a scene to fixed-length vectors.
//!
//! Proposals in a scene file carry their own features. Boxes created during
//! the pipeline (augmented positives, negatives) need a provider.

use crate::data_model::{LabelImage, Scene};
use crate::geometry::{box_iou, BBox};

pub trait FeatureProvider: Sync {
    fn features(&self, scene: &Scene, boxes: &[BBox]) -> Vec<Vec<f64>>;
}

/// Pixel index range `[lo, hi)` whose centers fall inside `[a, b)`.
fn pixel_span(a: f64, b: f64, limit: u32) -> (usize, usize) {
    let lo = (a - 0.5).ceil().clamp(0.0, limit as f64) as usize;
    let hi = (b - 0.5).ceil().clamp(0.0, limit as f64) as usize;
    (lo, hi.max(lo))
}

/// One summed-area table per label value.
struct LabelIntegrals {
    width: usize,
    tables: Vec<Vec<u32>>,
}

impl LabelIntegrals {
    fn new(img: &LabelImage, num_labels: usize) -> Self {
        let (h, w) = (img.height as usize, img.width as usize);
        let stride = w + 1;
        let mut tables = vec![vec![0u32; (h + 1) * stride]; num_labels];
        for r in 0..h {
            for c in 0..w {
                let l = img.labels[r * w + c] as usize;
                for (k, t) in tables.iter_mut().enumerate() {
                    let own = u32::from(k == l);
                    t[(r + 1) * stride + c + 1] = own + t[r * stride + c + 1] + t[(r + 1) * stride + c] - t[r * stride + c];
                }
            }
        }
        Self { width: w, tables }
    }

    fn counts(&self, rows: (usize, usize), cols: (usize, usize)) -> Vec<f64> {
        let stride = self.width + 1;
        self.tables
            .iter()
            .map(|t| {
                let at = |r: usize, c: usize| t[r * stride + c] as f64;
                at(rows.1, cols.1) - at(rows.0, cols.1) - at(rows.1, cols.0) + at(rows.0, cols.0)
            })
            .collect()
    }
}

/// Label histogram of the box interior, the foreground share of a thin ring
/// around the box, and two shape statistics, zero-padded to `feature_dim`.
///
/// Labels are background (0) and one per class (`1..=K`). Layout: `K+1`
/// label fractions, ring foreground fraction, `sqrt(area)/side`,
/// `ln(width/height)`. Needs the scene's label image.
/// Width in pixels of the context ring.
pub const RING_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, Copy)]
pub struct RenderedFeatures {
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl RenderedFeatures {
    pub const fn num_labels(num_classes: usize) -> usize {
        num_classes + 1
    }

    pub const fn required_dim(num_classes: usize) -> usize {
        Self::num_labels(num_classes) + 3
    }

    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            num_classes: scene.num_classes,
            feature_dim: scene.feature_dim,
        }
    }

    pub fn compute(&self, img: &LabelImage, boxes: &[BBox]) -> Vec<Vec<f64>> {
        let labels = Self::num_labels(self.num_classes);
        let integrals = LabelIntegrals::new(img, labels);
        let side = img.width.max(img.height) as f64;
        boxes
            .iter()
            .map(|b| {
                let rows = pixel_span(b.y0, b.y1, img.height);
                let cols = pixel_span(b.x0, b.x1, img.width);
                let inner = integrals.counts(rows, cols);
                let outer = integrals.counts(
                    pixel_span(b.y0 - RING_WIDTH, b.y1 + RING_WIDTH, img.height),
                    pixel_span(b.x0 - RING_WIDTH, b.x1 + RING_WIDTH, img.width),
                );
                let ring: Vec<f64> = outer.iter().zip(&inner).map(|(o, i)| o - i).collect();
                let ring_total: f64 = ring.iter().sum();
                let mut f = Vec::with_capacity(self.feature_dim);
                f.extend(normalized(&inner));
                f.push(if ring_total > 0.0 { 1.0 - ring[0] / ring_total } else { 0.0 });
                f.push(b.area().max(0.0).sqrt() / side);
                f.push((b.width().max(1e-3) / b.height().max(1e-3)).ln());
                f.resize(self.feature_dim, 0.0);
                f
            })
            .collect()
    }
}

fn normalized(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![0.0; counts.len()]
    }
}

impl FeatureProvider for RenderedFeatures {
    /// Falls back to [`NearestProposalFeatures`] when the scene has no image.
    fn features(&self, scene: &Scene, boxes: &[BBox]) -> Vec<Vec<f64>> {
        match &scene.image {
            Some(img) => self.compute(img, boxes),
            None => NearestProposalFeatures.features(scene, boxes),
        }
    }
}

/// [`RenderedFeatures`] configured from each scene's own class count and dimension.
#[derive(Debug, Clone, Copy, Default)]
pub struct SceneFeatures;

impl FeatureProvider for SceneFeatures {
    fn features(&self, scene: &Scene, boxes: &[BBox]) -> Vec<Vec<f64>> {
        RenderedFeatures::from_scene(scene).features(scene, boxes)
    }
}

/// Copies the feature of the scene proposal with the highest box IoU
/// (first one on ties); zeros when nothing overlaps.
#[derive(Debug, Clone, Copy, Default)]
pub struct NearestProposalFeatures;

impl FeatureProvider for NearestProposalFeatures {
    fn features(&self, scene: &Scene, boxes: &[BBox]) -> Vec<Vec<f64>> {
        let all: Vec<_> = scene.bags.iter().flat_map(|b| &b.proposals).collect();
        boxes
            .iter()
            .map(|b| {
                let mut best: Option<(f64, &Vec<f64>)> = None;
                for p in &all {
                    let iou = box_iou(b, &p.bbox);
                    if iou > 0.0 && best.map_or(true, |(v, _)| iou > v) {
                        best = Some((iou, &p.feature));
                    }
                }
                best.map_or_else(|| vec![0.0; scene.feature_dim], |(_, f)| f.clone())
            })
            .collect()
    }
}
