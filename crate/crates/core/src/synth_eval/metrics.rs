//! Corpus metrics against ground truth: box mIoU and the fill-ratio gap.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_model::{PseudoLabel, Scene};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, min_bounding_rect, BBox, MaskRle};

fn gt_boxes(gt: &[crate::data_model::GroundTruth]) -> HashMap<u64, BBox> {
    gt.iter().map(|g| (g.instance_id, g.bbox)).collect()
}

/// Mean box IoU between pseudo-labels and their ground truth; 0 for no labels.
pub fn miou_box(labels: &[PseudoLabel], ground_truth: &[crate::data_model::GroundTruth]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let gt = gt_boxes(ground_truth);
    let mut total = 0.0;
    for l in labels {
        let g = gt.get(&l.instance_id).ok_or(Error::MissingGt(l.instance_id))?;
        total += box_iou(&l.box_prm, g);
    }
    Ok(total / labels.len() as f64)
}

/// Mask area over box area.
pub fn rv_ratio(mask: &MaskRle, bbox: &BBox) -> Result<f64> {
    let a = bbox.area();
    if !(a > 0.0) {
        return Err(Error::ZeroAreaBox);
    }
    Ok(mask.area() as f64 / a)
}

/// Fill ratio of a mask within its own bounding box; 0 for an empty mask.
pub fn self_rv(mask: &MaskRle) -> f64 {
    match min_bounding_rect(mask) {
        Ok(b) => mask.area() as f64 / b.area(),
        Err(_) => 0.0,
    }
}

/// Largest fill ratio over the masked proposals of a bag; 0 if none.
pub fn rv_max(scene: &Scene, object: usize) -> f64 {
    scene.bags[object]
        .proposals
        .iter()
        .filter_map(|p| p.mask.as_ref().and_then(|m| rv_ratio(m, &p.bbox).ok()))
        .fold(0.0, f64::max)
}

/// Mean over all objects of the corpus of [`rv_max`].
pub fn t_rv(scenes: &[Scene]) -> f64 {
    let vals: Vec<f64> = scenes
        .iter()
        .flat_map(|s| (0..s.num_objects()).map(move |i| rv_max(s, i)))
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Signed and absolute mean of `R_v(selected) − R_v(gt)` over qualifying objects.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Gap {
    pub gap: f64,
    pub gap_abs: f64,
    pub qualifying: usize,
}

/// Per-object fill-ratio difference, keyed by scene and object index.
fn rv_differences(scenes: &[Scene], labels: &[Vec<PseudoLabel>]) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (si, (scene, ls)) in scenes.iter().zip(labels).enumerate() {
        let gt = scene.ground_truth.as_deref().unwrap_or(&[]);
        for (oi, l) in ls.iter().enumerate() {
            let g = gt
                .iter()
                .find(|g| g.instance_id == l.instance_id)
                .ok_or(Error::MissingGt(l.instance_id))?;
            let sel = l.mask_prm.as_ref().map_or(0.0, self_rv);
            out.push((si, oi, sel - rv_ratio(&g.mask, &g.bbox)?));
        }
    }
    Ok(out)
}

/// Gap over objects whose [`rv_max`] exceeds `threshold`; zero when none qualify.
pub fn gap(scenes: &[Scene], labels: &[Vec<PseudoLabel>], threshold: f64) -> Result<Gap> {
    let diffs: Vec<f64> = rv_differences(scenes, labels)?
        .into_iter()
        .filter(|&(si, oi, _)| rv_max(&scenes[si], oi) > threshold)
        .map(|(_, _, d)| d)
        .collect();
    if diffs.is_empty() {
        return Ok(Gap::default());
    }
    let n = diffs.len() as f64;
    Ok(Gap {
        gap: diffs.iter().sum::<f64>() / n,
        gap_abs: diffs.iter().map(|d| d.abs()).sum::<f64>() / n,
        qualifying: diffs.len(),
    })
}

/// `(t_rv, gap_single, gap_our)` for a baseline and a full run over the same corpus.
pub fn gap_metrics(scenes: &[Scene], ours: &[Vec<PseudoLabel>], single: &[Vec<PseudoLabel>]) -> Result<(f64, Gap, Gap)> {
    let t = t_rv(scenes);
    Ok((t, gap(scenes, single, t)?, gap(scenes, ours, t)?))
}

/// Number of labels whose box holds the annotated points of two or more objects of its class.
pub fn group_selections(scene: &Scene, labels: &[PseudoLabel]) -> usize {
    labels
        .iter()
        .filter(|l| {
            scene
                .annotations
                .iter()
                .filter(|a| a.class_id == l.class_id && l.box_prm.contains_point(&a.point))
                .count()
                >= 2
        })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene: String,
    pub objects: usize,
    pub miou_box: f64,
    pub rv_gap_mean: f64,
    pub group_selections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub objects: usize,
    pub miou_box: f64,
    pub t_rv: f64,
    pub gap: f64,
    pub gap_abs: f64,
    pub gap_qualifying: usize,
    /// Mean `R_v(selected) − R_v(gt)` over every object.
    pub rv_gap_all: f64,
    /// Fraction of labels whose box covers two or more same-class points.
    pub group_fraction: f64,
    pub per_scene: Vec<SceneRow>,
    pub config: serde_json::Value,
}

/// Evaluates labels of a corpus whose scenes all carry ground truth.
pub fn evaluate(names: &[String], scenes: &[Scene], labels: &[Vec<PseudoLabel>], config: serde_json::Value) -> Result<EvalReport> {
    let threshold = t_rv(scenes);
    let g = gap(scenes, labels, threshold)?;
    let diffs = rv_differences(scenes, labels)?;
    let mut per_scene = Vec::with_capacity(scenes.len());
    let (mut objects, mut iou_sum, mut groups) = (0, 0.0, 0);
    for (si, (scene, ls)) in scenes.iter().zip(labels).enumerate() {
        let gt = scene
            .ground_truth
            .as_deref()
            .ok_or_else(|| Error::MissingGt(ls.first().map_or(0, |l| l.instance_id)))?;
        let m = miou_box(ls, gt)?;
        let boxes = gt_boxes(gt);
        for l in ls {
            iou_sum += box_iou(&l.box_prm, &boxes[&l.instance_id]);
        }
        let scene_diffs: Vec<f64> = diffs.iter().filter(|d| d.0 == si).map(|d| d.2).collect();
        let group = group_selections(scene, ls);
        objects += ls.len();
        groups += group;
        per_scene.push(SceneRow {
            scene: names.get(si).cloned().unwrap_or_else(|| si.to_string()),
            objects: ls.len(),
            miou_box: m,
            rv_gap_mean: mean(&scene_diffs),
            group_selections: group,
        });
    }
    let all: Vec<f64> = diffs.iter().map(|d| d.2).collect();
    Ok(EvalReport {
        scenes: scenes.len(),
        objects,
        miou_box: if objects == 0 { 0.0 } else { iou_sum / objects as f64 },
        t_rv: threshold,
        gap: g.gap,
        gap_abs: g.gap_abs,
        gap_qualifying: g.qualifying,
        rv_gap_all: mean(&all),
        group_fraction: if objects == 0 { 0.0 } else { groups as f64 / objects as f64 },
        per_scene,
        config,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    pub fn per_scene_csv(&self) -> String {
        let mut s = String::from("scene,objects,miou_box,rv_gap_mean,group_selections\n");
        for r in &self.per_scene {
            let _ = writeln!(s, "{},{},{},{},{}", r.scene, r.objects, r.miou_box, r.rv_gap_mean, r.group_selections);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::tests::minimal_scene;
    use crate::data_model::{GroundTruth, LabelScores};

    fn label(id: u64, b: BBox, mask: Option<MaskRle>) -> PseudoLabel {
        PseudoLabel {
            instance_id: id,
            class_id: 0,
            box_prm: b,
            mask_prm: mask,
            aux_masks: vec![],
            psm_box: b,
            select_box: b,
            scores: LabelScores::default(),
            diagnostics: vec![],
        }
    }

    fn gt(id: u64, b: BBox) -> GroundTruth {
        GroundTruth {
            instance_id: id,
            bbox: b,
            mask: MaskRle::empty(4, 4),
        }
    }

    #[test]
    fn miou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(miou_box(&[label(1, a, None)], &[gt(1, a)]).unwrap(), 1.0);
        assert_eq!(miou_box(&[label(1, a, None)], &[gt(1, b)]).unwrap(), 0.0);
        // IoU 0.4 and 0.6 against a 10x10 ground truth
        let g = [gt(1, a), gt(2, a)];
        let l = [label(1, BBox::new(0.0, 0.0, 4.0, 10.0), None), label(2, BBox::new(0.0, 0.0, 6.0, 10.0), None)];
        assert!((miou_box(&l, &g).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(miou_box(&[label(9, a, None)], &g), Err(Error::MissingGt(9))));
    }

    #[test]
    fn rv_examples() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let full = MaskRle::from_fn(10, 10, |_, _| true);
        assert_eq!(rv_ratio(&full, &b).unwrap(), 1.0);
        assert_eq!(rv_ratio(&MaskRle::empty(10, 10), &b).unwrap(), 0.0);
        let half = MaskRle::from_fn(10, 10, |r, _| r < 5);
        assert_eq!(rv_ratio(&half, &b).unwrap(), 0.5);
        assert!(matches!(rv_ratio(&full, &BBox::new(1.0, 1.0, 1.0, 5.0)), Err(Error::ZeroAreaBox)));
    }

    #[test]
    fn gap_is_zero_when_selection_is_ground_truth() {
        let s = minimal_scene();
        let g = &s.ground_truth.as_ref().unwrap()[0];
        let l = vec![vec![label(7, g.bbox, Some(g.mask.clone()))]];
        let r = gap(&[s.clone()], &l, 0.5).unwrap();
        assert_eq!(r.gap, 0.0);
        assert_eq!(r.qualifying, 1);
    }

    #[test]
    fn lone_object_never_exceeds_its_own_threshold() {
        let s = minimal_scene();
        let g = &s.ground_truth.as_ref().unwrap()[0];
        let l = vec![vec![label(7, g.bbox, Some(MaskRle::empty(8, 8)))]];
        let corpus = [s.clone()];
        let r = gap(&corpus, &l, t_rv(&corpus)).unwrap();
        assert_eq!(r, Gap::default());
        assert_eq!(r.qualifying, 0);
    }
}
