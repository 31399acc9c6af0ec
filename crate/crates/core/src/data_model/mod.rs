//! Scene and corpus schema, validation and JSON persistence.

mod config;
mod labels;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{min_bounding_rect, BBox, MaskRle, Point2D};

pub use config::{DistanceForm, PipelineConfig, Toggles, TrainConfig};
pub use labels::{load_pseudo_labels, save_pseudo_labels, LabelScores, PseudoLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPoint {
    pub instance_id: u64,
    pub class_id: usize,
    #[serde(flatten)]
    pub point: Point2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "rle")]
    pub mask: Option<MaskRle>,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalBag {
    #[serde(rename = "instance_id")]
    pub owner: u64,
    pub proposals: Vec<Proposal>,
}

impl ProposalBag {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub instance_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "rle")]
    pub mask: MaskRle,
}

/// Per-pixel label map (0 = background, `1 + class` = class color).
///
/// Optional companion of a scene; feature providers read it to featurize
/// boxes that are not part of any bag. Serialized as row-major `[label, run]` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub height: u32,
    pub width: u32,
    pub labels: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct LabelImageRepr {
    h: u32,
    w: u32,
    runs: Vec<(u8, u32)>,
}

impl Serialize for LabelImage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut runs: Vec<(u8, u32)> = Vec::new();
        for &l in &self.labels {
            match runs.last_mut() {
                Some((v, n)) if *v == l => *n += 1,
                _ => runs.push((l, 1)),
            }
        }
        LabelImageRepr {
            h: self.height,
            w: self.width,
            runs,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabelImage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = LabelImageRepr::deserialize(d)?;
        let mut labels = Vec::with_capacity(repr.h as usize * repr.w as usize);
        for (v, n) in repr.runs {
            labels.extend(std::iter::repeat(v).take(n as usize));
        }
        Ok(LabelImage {
            height: repr.h,
            width: repr.w,
            labels,
        })
    }
}

impl LabelImage {
    pub fn get(&self, row: u32, col: u32) -> u8 {
        self.labels[row as usize * self.width as usize + col as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub annotations: Vec<AnnotatedPoint>,
    pub bags: Vec<ProposalBag>,
    pub ground_truth: Option<Vec<GroundTruth>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<LabelImage>,
}

impl Scene {
    pub fn num_objects(&self) -> usize {
        self.annotations.len()
    }

    pub fn gt_for(&self, instance_id: u64) -> Option<&GroundTruth> {
        self.ground_truth
            .as_ref()?
            .iter()
            .find(|g| g.instance_id == instance_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    BagCountMismatch { annotations: usize, bags: usize },
    OwnerMismatch { expected: u64, found: u64 },
    DuplicateInstance(u64),
    ClassOutOfRange { class_id: usize, num_classes: usize },
    PointOutsideScene,
    EmptyBag,
    FeatureDimMismatch { expected: usize, found: usize },
    NonFiniteFeature,
    InvalidBox,
    MaskShape,
    RleInconsistent,
    EmptyMask,
    BoxMaskMismatch,
    UnknownInstance(u64),
    ImageShape,
}

/// A broken scene invariant, located by a JSON-style field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}", self.path, self.kind)
    }
}

/// Lists every broken invariant; empty iff the scene is valid.
pub fn validate_scene(s: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: String, kind: ViolationKind| out.push(Violation { path, kind });

    if s.bags.len() != s.annotations.len() {
        push(
            "bags".into(),
            ViolationKind::BagCountMismatch {
                annotations: s.annotations.len(),
                bags: s.bags.len(),
            },
        );
    }
    let mut seen = std::collections::BTreeSet::new();
    for (i, a) in s.annotations.iter().enumerate() {
        if !seen.insert(a.instance_id) {
            push(
                format!("annotations[{i}].instance_id"),
                ViolationKind::DuplicateInstance(a.instance_id),
            );
        }
        if a.class_id >= s.num_classes {
            push(
                format!("annotations[{i}].class_id"),
                ViolationKind::ClassOutOfRange {
                    class_id: a.class_id,
                    num_classes: s.num_classes,
                },
            );
        }
        let p = a.point;
        let inside = p.x.is_finite()
            && p.y.is_finite()
            && 0.0 <= p.x
            && p.x < s.width as f64
            && 0.0 <= p.y
            && p.y < s.height as f64;
        if !inside {
            push(format!("annotations[{i}]"), ViolationKind::PointOutsideScene);
        }
    }
    for (i, bag) in s.bags.iter().enumerate() {
        if let Some(a) = s.annotations.get(i) {
            if a.instance_id != bag.owner {
                push(
                    format!("bags[{i}].instance_id"),
                    ViolationKind::OwnerMismatch {
                        expected: a.instance_id,
                        found: bag.owner,
                    },
                );
            }
        }
        if bag.proposals.is_empty() {
            push(format!("bags[{i}].proposals"), ViolationKind::EmptyBag);
        }
        for (m, p) in bag.proposals.iter().enumerate() {
            let path = format!("bags[{i}].proposals[{m}]");
            if p.feature.len() != s.feature_dim {
                push(
                    format!("{path}.feature"),
                    ViolationKind::FeatureDimMismatch {
                        expected: s.feature_dim,
                        found: p.feature.len(),
                    },
                );
            }
            if p.feature.iter().any(|v| !v.is_finite()) {
                push(format!("{path}.feature"), ViolationKind::NonFiniteFeature);
            }
            if !p.bbox.is_valid() {
                push(format!("{path}.box"), ViolationKind::InvalidBox);
            }
            if let Some(mask) = &p.mask {
                check_mask(s, mask, &format!("{path}.rle"), &mut push);
                if let Ok(rect) = min_bounding_rect(mask) {
                    if rect != p.bbox {
                        push(format!("{path}.box"), ViolationKind::BoxMaskMismatch);
                    }
                }
            }
        }
    }
    if let Some(gt) = &s.ground_truth {
        for (g_idx, g) in gt.iter().enumerate() {
            let path = format!("ground_truth[{g_idx}]");
            if !s.annotations.iter().any(|a| a.instance_id == g.instance_id) {
                push(
                    format!("{path}.instance_id"),
                    ViolationKind::UnknownInstance(g.instance_id),
                );
            }
            if !g.bbox.is_valid() {
                push(format!("{path}.box"), ViolationKind::InvalidBox);
            }
            check_mask(s, &g.mask, &format!("{path}.rle"), &mut push);
        }
    }
    if let Some(img) = &s.image {
        if img.height != s.height
            || img.width != s.width
            || img.labels.len() != s.height as usize * s.width as usize
        {
            push("image".into(), ViolationKind::ImageShape);
        }
    }
    out
}

fn check_mask(s: &Scene, mask: &MaskRle, path: &str, push: &mut impl FnMut(String, ViolationKind)) {
    if mask.height != s.height || mask.width != s.width {
        push(path.to_string(), ViolationKind::MaskShape);
    }
    if !mask.is_consistent() {
        push(path.to_string(), ViolationKind::RleInconsistent);
    } else if mask.area() == 0 {
        push(path.to_string(), ViolationKind::EmptyMask);
    }
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Parses and validates a scene file.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = read_file(path)?;
    let scene: Scene = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    let violations = validate_scene(&scene);
    if let Some(v) = violations
        .iter()
        .find(|v| matches!(v.kind, ViolationKind::FeatureDimMismatch { .. }))
    {
        if let ViolationKind::FeatureDimMismatch { expected, found } = v.kind {
            return Err(Error::FeatureDimMismatch {
                path: v.path.clone(),
                expected,
                found,
            });
        }
    }
    if let Some(v) = violations.into_iter().next() {
        return Err(Error::Validation {
            path: v.path,
            message: format!("{:?}", v.kind),
        });
    }
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string(scene).expect("scene serialization is infallible");
    write_file(path.as_ref(), &text)
}

/// Corpus index: scene file names relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub scenes: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Manifest> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = read_file(&path)?;
        serde_json::from_str(&text).map_err(|source| Error::Parse { path, source })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialization is infallible");
        write_file(&dir.as_ref().join(MANIFEST_FILE), &text)
    }

    pub fn scene_paths(&self, dir: impl AsRef<Path>) -> Vec<PathBuf> {
        self.scenes.iter().map(|s| dir.as_ref().join(s)).collect()
    }
}

/// Loads every scene of a corpus directory and checks corpus-wide `K` and `D`.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<Scene>)> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for (i, path) in manifest.scene_paths(dir).iter().enumerate() {
        let scene = load_scene(path)?;
        if scene.feature_dim != manifest.feature_dim {
            return Err(Error::FeatureDimMismatch {
                path: format!("scenes[{i}].feature_dim"),
                expected: manifest.feature_dim,
                found: scene.feature_dim,
            });
        }
        if scene.num_classes != manifest.num_classes {
            return Err(Error::Validation {
                path: format!("scenes[{i}].num_classes"),
                message: format!("expected {}, found {}", manifest.num_classes, scene.num_classes),
            });
        }
        scenes.push(scene);
    }
    Ok((manifest, scenes))
}
