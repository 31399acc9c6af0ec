//! Synthetic scenes with known ground truth.
//!
//! Objects are rectangles and ellipses on a background label. Some ellipses
//! have a class-colored core inside a rim of randomly colored pixels, so the
//! core alone is the most class-specific region. Adjacent objects come in
//! same-class twins aligned along their shared side. Each object's bag holds
//! a slightly eroded copy of the object, and optionally part proposals
//! (sub-regions with a fuller box), a group proposal (union with the twin)
//! and distractors.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    save_scene, AnnotatedPoint, GroundTruth, LabelImage, Manifest, Proposal, ProposalBag, Scene,
};
use crate::error::{Error, Result};
use crate::features::RenderedFeatures;
use crate::geometry::{box_iou, min_bounding_rect, BBox, MaskRle, Point2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_scenes: usize,
    pub width: u32,
    pub height: u32,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: u32,
    pub max_object_size: u32,
    /// Probability that an object is placed as the aligned twin of an earlier one of the same class.
    pub adjacency_rate: f64,
    /// Probability that an object has a rim around its class-colored core;
    /// only such objects get part proposals.
    pub part_rate: f64,
    /// Fraction of ellipses among objects.
    pub ellipse_rate: f64,
    /// Width of the class-agnostic rim as a fraction of the object's half-size.
    pub rim_width: f64,
    pub proposals_per_bag: usize,
    pub feature_dim: usize,
    /// Probability that a pixel of the featurized image is replaced by a random label.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_scenes: 200,
            width: 64,
            height: 64,
            num_classes: 3,
            min_objects: 2,
            max_objects: 5,
            min_object_size: 10,
            max_object_size: 22,
            adjacency_rate: 0.3,
            part_rate: 0.5,
            ellipse_rate: 0.75,
            rim_width: 0.5,
            proposals_per_bag: 8,
            feature_dim: 7,
            pixel_noise: 0.02,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_scenes", self.num_scenes),
            ("num_classes", self.num_classes),
            ("min_objects", self.min_objects),
            ("max_objects", self.max_objects),
            ("proposals_per_bag", self.proposals_per_bag),
            ("feature_dim", self.feature_dim),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        for (field, v) in [
            ("adjacency_rate", self.adjacency_rate),
            ("part_rate", self.part_rate),
            ("ellipse_rate", self.ellipse_rate),
            ("rim_width", self.rim_width),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("min_objects", "must not exceed max_objects"));
        }
        if self.min_object_size < 6 {
            return Err(Error::config("min_object_size", "must be >= 6"));
        }
        if self.min_object_size > self.max_object_size {
            return Err(Error::config("min_object_size", "must not exceed max_object_size"));
        }
        if self.max_object_size + 2 > self.width.min(self.height) {
            return Err(Error::config("max_object_size", "objects must fit inside the scene"));
        }
        if self.num_classes > 255 {
            return Err(Error::config("num_classes", "at most 255 classes"));
        }
        let need = RenderedFeatures::required_dim(self.num_classes);
        if self.feature_dim < need {
            return Err(Error::config("feature_dim", format!("must be >= {need} for {} classes", self.num_classes)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SyntheticConfig =
            serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Seed of scene `index`.
    pub fn scene_seed(&self, index: usize) -> u64 {
        self.seed ^ index as u64
    }
}

/// How a generated proposal relates to its object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Whole,
    Part,
    Group,
    Distractor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub scene: Scene,
    /// Kind of every proposal, parallel to `scene.bags`.
    pub kinds: Vec<Vec<ProposalKind>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    class_id: usize,
    shape: Shape,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    rimmed: bool,
    partner: Option<usize>,
}

impl Placed {
    fn covers(&self, row: u32, col: u32) -> bool {
        let (x1, y1) = (self.x0 + self.w, self.y0 + self.h);
        if col < self.x0 || col >= x1 || row < self.y0 || row >= y1 {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let (rx, ry) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                let dx = (col as f64 + 0.5 - (self.x0 as f64 + rx)) / rx;
                let dy = (row as f64 + 0.5 - (self.y0 as f64 + ry)) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    /// True for pixels of the object outside its class-colored core.
    fn in_rim(&self, row: u32, col: u32, rim_width: f64) -> bool {
        if !self.rimmed {
            return false;
        }
        let (rx, ry) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
        let dx = (col as f64 + 0.5 - (self.x0 as f64 + rx)).abs() / rx;
        let dy = (row as f64 + 0.5 - (self.y0 as f64 + ry)).abs() / ry;
        let inner = 1.0 - rim_width;
        match self.shape {
            Shape::Rect => dx.max(dy) > inner,
            Shape::Ellipse => dx * dx + dy * dy > inner * inner,
        }
    }

    /// Core bounding box as integer pixel bounds `(x0, y0, x1, y1)`.
    fn core_bounds(&self, rim_width: f64) -> (u32, u32, u32, u32) {
        let mx = (self.w as f64 * rim_width / 2.0).round() as u32;
        let my = (self.h as f64 * rim_width / 2.0).round() as u32;
        (self.x0 + mx, self.y0 + my, self.x0 + self.w - mx, self.y0 + self.h - my)
    }

    /// True when the two boxes, grown by one pixel, do not meet.
    fn apart(&self, o: &Placed) -> bool {
        self.x0 + self.w + 1 <= o.x0 || o.x0 + o.w + 1 <= self.x0 || self.y0 + self.h + 1 <= o.y0 || o.y0 + o.h + 1 <= self.y0
    }
}

/// Row-major binary grid used while building masks.
#[derive(Clone)]
struct Grid {
    h: u32,
    w: u32,
    px: Vec<bool>,
}

impl Grid {
    fn from_fn(h: u32, w: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut px = Vec::with_capacity((h * w) as usize);
        for r in 0..h {
            for c in 0..w {
                px.push(f(r, c));
            }
        }
        Self { h, w, px }
    }

    fn at(&self, r: u32, c: u32) -> bool {
        self.px[(r * self.w + c) as usize]
    }

    fn area(&self) -> usize {
        self.px.iter().filter(|&&b| b).count()
    }

    fn and_rect(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> Grid {
        Grid::from_fn(self.h, self.w, |r, c| self.at(r, c) && (x0..x1).contains(&c) && (y0..y1).contains(&r))
    }

    fn or(&self, o: &Grid) -> Grid {
        Grid::from_fn(self.h, self.w, |r, c| self.at(r, c) || o.at(r, c))
    }

    fn to_rle(&self) -> MaskRle {
        MaskRle::from_fn(self.h, self.w, |r, c| self.at(r, c))
    }
}

/// Ellipse inscribed in the integer box `[x0, x1) × [y0, y1)`.
fn ellipse_grid(h: u32, w: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Grid {
    let blob = Placed {
        class_id: 0,
        shape: Shape::Ellipse,
        x0,
        y0,
        w: x1 - x0,
        h: y1 - y0,
        rimmed: false,
        partner: None,
    };
    Grid::from_fn(h, w, |r, c| blob.covers(r, c))
}

fn rv(grid: &Grid, bbox: &BBox) -> f64 {
    grid.area() as f64 / bbox.area()
}

fn place_objects(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Placed> {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<Placed> = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = if rng.gen_bool(cfg.ellipse_rate) { Shape::Ellipse } else { Shape::Rect };
        let rimmed = rng.gen_bool(cfg.part_rate);
        // a rectangle fills its box, so no crop of it can be denser
        let shape = if rimmed { Shape::Ellipse } else { shape };
        let w = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
        let h = rng.gen_range(cfg.min_object_size..=cfg.max_object_size);
        let lonely: Vec<usize> = (0..placed.len()).filter(|&j| placed[j].partner.is_none()).collect();
        let mut candidate = None;
        if !lonely.is_empty() && rng.gen_bool(cfg.adjacency_rate) {
            let j = *lonely.choose(rng).expect("non-empty");
            let o = placed[j];
            let mut sides = [0u8, 1, 2, 3];
            sides.shuffle(rng);
            for side in sides {
                let gap = rng.gen_range(2..=4i64);
                // twins line up along the shared side
                let (x, y, w, h) = match side {
                    0 => (o.x0 as i64 + o.w as i64 + gap, o.y0 as i64, w, o.h),
                    1 => (o.x0 as i64 - gap - w as i64, o.y0 as i64, w, o.h),
                    2 => (o.x0 as i64, o.y0 as i64 + o.h as i64 + gap, o.w, h),
                    _ => (o.x0 as i64, o.y0 as i64 - gap - h as i64, o.w, h),
                };
                if x < 0 || y < 0 || x + w as i64 > cfg.width as i64 || y + h as i64 > cfg.height as i64 {
                    continue;
                }
                let p = Placed {
                    class_id: o.class_id,
                    shape: o.shape,
                    x0: x as u32,
                    y0: y as u32,
                    w,
                    h,
                    rimmed: o.rimmed,
                    partner: Some(j),
                };
                if placed.iter().all(|q| p.apart(q)) {
                    candidate = Some(p);
                    break;
                }
            }
        }
        if candidate.is_none() {
            let class_id = rng.gen_range(0..cfg.num_classes);
            for _ in 0..50 {
                let p = Placed {
                    class_id,
                    shape,
                    x0: rng.gen_range(0..=cfg.width - w),
                    y0: rng.gen_range(0..=cfg.height - h),
                    w,
                    h,
                    rimmed,
                    partner: None,
                };
                if placed.iter().all(|q| p.apart(q)) {
                    candidate = Some(p);
                    break;
                }
            }
        }
        if let Some(p) = candidate {
            if let Some(j) = p.partner {
                placed[j].partner = Some(placed.len());
            }
            placed.push(p);
        }
    }
    placed
}

fn side_shrink(side: f64) -> u32 {
    (0.05 * side).floor() as u32
}

fn masked_proposal(grid: &Grid) -> Option<(BBox, MaskRle)> {
    let rle = grid.to_rle();
    let bbox = min_bounding_rect(&rle).ok()?;
    Some((bbox, rle))
}

/// Proposals of one object, each with its kind and pixel mask.
fn object_bag(
    cfg: &SyntheticConfig,
    obj: &Placed,
    gt: &Grid,
    gt_box: &BBox,
    point: &Point2D,
    partner_gt: Option<&Grid>,
    rng: &mut ChaCha8Rng,
) -> Vec<(ProposalKind, BBox, MaskRle, Grid)> {
    let (h, w) = (cfg.height, cfg.width);
    let mut out = Vec::new();

    // eroded copy of the object, IoU >= 0.8 by construction
    let (gx0, gy0, gx1, gy1) = (gt_box.x0 as u32, gt_box.y0 as u32, gt_box.x1 as u32, gt_box.y1 as u32);
    let (sx, sy) = (side_shrink(gt_box.width()), side_shrink(gt_box.height()));
    let mut whole = gt.and_rect(
        gx0 + rng.gen_range(0..=sx),
        gy0 + rng.gen_range(0..=sy),
        gx1 - rng.gen_range(0..=sx),
        gy1 - rng.gen_range(0..=sy),
    );
    match masked_proposal(&whole) {
        Some((b, _)) if box_iou(&b, gt_box) >= 0.8 && b.contains_point(point) => {}
        _ => whole = gt.clone(),
    }
    let (whole_box, whole_rle) = masked_proposal(&whole).expect("object masks are non-empty");
    let whole_rv = rv(&whole, &whole_box);
    out.push((ProposalKind::Whole, whole_box, whole_rle, whole));

    if obj.rimmed {
        let wanted = rng.gen_range(1..=2);
        let gt_area = gt.area() as f64;
        let mut made = 0;
        let (cx0, cy0, cx1, cy1) = obj.core_bounds(cfg.rim_width);
        let (cw, ch) = ((cx1 - cx0) as f64, (cy1 - cy0) as f64);
        for _ in 0..60 {
            if made == wanted {
                break;
            }
            // a jittered copy of the core box, stretched to reach the point
            let jx = rng.gen_range(-0.15..0.15) * cw;
            let jy = rng.gen_range(-0.15..0.15) * ch;
            let sx = rng.gen_range(0.8..1.1);
            let sy = rng.gen_range(0.8..1.1);
            let (mx, my) = ((cx0 + cx1) as f64 / 2.0 + jx, (cy0 + cy1) as f64 / 2.0 + jy);
            let x0 = ((mx - sx * cw / 2.0).min(point.x - 0.5).max(gt_box.x0)).round() as u32;
            let y0 = ((my - sy * ch / 2.0).min(point.y - 0.5).max(gt_box.y0)).round() as u32;
            let x1 = ((mx + sx * cw / 2.0).max(point.x + 0.5).min(gt_box.x1)).round() as u32;
            let y1 = ((my + sy * ch / 2.0).max(point.y + 0.5).min(gt_box.y1)).round() as u32;
            if x1 < x0 + 3 || y1 < y0 + 3 {
                continue;
            }
            let part = gt.and_rect(x0, y0, x1, y1);
            let Some((b, rle)) = masked_proposal(&part) else { continue };
            if !b.contains_point(point) || part.area() as f64 > 0.6 * gt_area || rv(&part, &b) <= whole_rv {
                continue;
            }
            out.push((ProposalKind::Part, b, rle, part));
            made += 1;
        }
    }

    if let Some(pg) = partner_gt {
        let group = gt.or(pg);
        let (b, rle) = masked_proposal(&group).expect("non-empty union");
        out.push((ProposalKind::Group, b, rle, group));
    }

    let mut attempts = 0;
    while out.len() < cfg.proposals_per_bag && attempts < 200 {
        attempts += 1;
        let (gw, gh) = (gt_box.width(), gt_box.height());
        let grid = match rng.gen_range(0..3) {
            0 => {
                let mut grow = || rng.gen_range(0.25..0.6);
                let x0 = (gt_box.x0 - grow() * gw).max(0.0).floor() as u32;
                let y0 = (gt_box.y0 - grow() * gh).max(0.0).floor() as u32;
                let x1 = (gt_box.x1 + grow() * gw).min(w as f64).ceil() as u32;
                let y1 = (gt_box.y1 + grow() * gh).min(h as f64).ceil() as u32;
                gt.or(&ellipse_grid(h, w, x0, y0, x1, y1))
            }
            1 => {
                let dx = rng.gen_range(0.35..0.7) * gw * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let dy = rng.gen_range(0.35..0.7) * gh * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let x0 = (gt_box.x0 + dx).clamp(0.0, w as f64) as u32;
                let y0 = (gt_box.y0 + dy).clamp(0.0, h as f64) as u32;
                let x1 = (gt_box.x1 + dx).clamp(0.0, w as f64) as u32;
                let y1 = (gt_box.y1 + dy).clamp(0.0, h as f64) as u32;
                if x1 < x0 + 4 || y1 < y0 + 4 {
                    continue;
                }
                ellipse_grid(h, w, x0, y0, x1, y1)
            }
            _ => {
                let bw = rng.gen_range(6..=20.min(w));
                let bh = rng.gen_range(6..=20.min(h));
                let x0 = rng.gen_range(0..=w - bw);
                let y0 = rng.gen_range(0..=h - bh);
                ellipse_grid(h, w, x0, y0, x0 + bw, y0 + bh)
            }
        };
        if let Some((b, rle)) = masked_proposal(&grid) {
            out.push((ProposalKind::Distractor, b, rle, grid));
        }
    }
    out.truncate(cfg.proposals_per_bag.max(1));
    out
}

/// Builds one scene deterministically from `scene_seed`.
pub fn generate_scene(cfg: &SyntheticConfig, scene_seed: u64) -> Result<Scene> {
    Ok(generate_scene_with_kinds(cfg, scene_seed)?.scene)
}

pub fn generate_scene_with_kinds(cfg: &SyntheticConfig, scene_seed: u64) -> Result<GeneratedScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let (h, w) = (cfg.height, cfg.width);
    let objects = place_objects(cfg, &mut rng);
    let gts: Vec<Grid> = objects.iter().map(|o| Grid::from_fn(h, w, |r, c| o.covers(r, c))).collect();

    let k = cfg.num_classes as u8;
    let mut labels = vec![0u8; (h * w) as usize];
    for (o, g) in objects.iter().zip(&gts) {
        for (i, &on) in g.px.iter().enumerate() {
            if on {
                let (r, c) = (i as u32 / w, i as u32 % w);
                labels[i] = if o.in_rim(r, c, cfg.rim_width) { rng.gen_range(1..=k) } else { 1 + o.class_id as u8 };
            }
        }
    }
    for l in labels.iter_mut() {
        if cfg.pixel_noise > 0.0 && rng.gen_bool(cfg.pixel_noise) {
            *l = rng.gen_range(0..=k);
        }
    }
    let image = LabelImage {
        height: h,
        width: w,
        labels,
    };

    let mut annotations = Vec::with_capacity(objects.len());
    let mut ground_truth = Vec::with_capacity(objects.len());
    let mut raw_bags = Vec::with_capacity(objects.len());
    for (i, (o, g)) in objects.iter().zip(&gts).enumerate() {
        let instance_id = i as u64 + 1;
        let pixels: Vec<usize> = (0..g.px.len()).filter(|&p| g.px[p]).collect();
        let p = *pixels.choose(&mut rng).expect("object masks are non-empty");
        let point = Point2D::new((p as u32 % w) as f64 + 0.5, (p as u32 / w) as f64 + 0.5);
        let gt_rle = g.to_rle();
        let gt_box = min_bounding_rect(&gt_rle)?;
        annotations.push(AnnotatedPoint {
            instance_id,
            class_id: o.class_id,
            point,
        });
        ground_truth.push(GroundTruth {
            instance_id,
            bbox: gt_box,
            mask: gt_rle,
        });
        let mut bag = object_bag(cfg, o, g, &gt_box, &point, o.partner.map(|j| &gts[j]), &mut rng);
        bag.shuffle(&mut rng);
        raw_bags.push(bag);
    }

    let provider = RenderedFeatures {
        num_classes: cfg.num_classes,
        feature_dim: cfg.feature_dim,
    };
    let mut bags = Vec::with_capacity(raw_bags.len());
    let mut kinds = Vec::with_capacity(raw_bags.len());
    for (i, raw) in raw_bags.into_iter().enumerate() {
        let boxes: Vec<BBox> = raw.iter().map(|e| e.1).collect();
        let feats = provider.compute(&image, &boxes);
        kinds.push(raw.iter().map(|e| e.0).collect());
        bags.push(ProposalBag {
            owner: i as u64 + 1,
            proposals: raw
                .into_iter()
                .zip(feats)
                .map(|((_, bbox, rle, _), feature)| Proposal {
                    bbox,
                    mask: Some(rle),
                    feature,
                })
                .collect(),
        });
    }
    Ok(GeneratedScene {
        scene: Scene {
            width: w,
            height: h,
            num_classes: cfg.num_classes,
            feature_dim: cfg.feature_dim,
            annotations,
            bags,
            ground_truth: Some(ground_truth),
            image: Some(image),
        },
        kinds,
    })
}

/// File name of scene `index` inside a corpus directory.
pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:04}.json")
}

/// Generates every scene in parallel (order-independent) and returns them in index order.
pub fn generate_corpus(cfg: &SyntheticConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..cfg.num_scenes)
        .into_par_iter()
        .map(|i| generate_scene(cfg, cfg.scene_seed(i)))
        .collect()
}

/// Writes scenes and a manifest into `dir`, creating it if needed.
pub fn write_corpus(cfg: &SyntheticConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let scenes = generate_corpus(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..scenes.len()).map(scene_file_name).collect();
    scenes
        .par_iter()
        .zip(&names)
        .try_for_each(|(s, n)| save_scene(s, dir.join(n)))?;
    let manifest = Manifest {
        num_classes: cfg.num_classes,
        feature_dim: cfg.feature_dim,
        scenes: names,
    };
    manifest.save(dir)?;
    Ok(manifest)
}
