//! First-stage selection: train a MIL head on the raw bags and pick the best
//! proposal of each object.

use crate::data_model::{PipelineConfig, ProposalBag, Scene};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mil_head::{
    forward_features, forward_scores, psm_loss_and_grads, sgd_train, Mat, MilHeadParams, PsmBatch, PsmObject, ScoreTensor,
    TrainOutcome,
};
use crate::pdg::{scene_penalties, DistancePenalty};

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

pub(crate) fn bag_features(bag: &ProposalBag) -> Mat {
    Mat::from_rows(&bag.proposals.iter().map(|p| p.feature.clone()).collect::<Vec<_>>())
}

/// Distance penalties of every bag, honoring the guidance toggle.
pub fn penalties(scene: &Scene, cfg: &PipelineConfig) -> Vec<DistancePenalty> {
    scene_penalties(scene, cfg.d, cfg.distance_form, cfg.toggles.pdg)
}

pub fn psm_batch(scene: &Scene, penalties: &[DistancePenalty]) -> PsmBatch {
    PsmBatch {
        objects: scene
            .bags
            .iter()
            .zip(&scene.annotations)
            .zip(penalties)
            .filter(|((bag, _), _)| !bag.is_empty())
            .map(|((bag, ann), pen)| PsmObject {
                features: bag_features(bag),
                s_dis: pen.s_dis.clone(),
                class_id: ann.class_id,
            })
            .collect(),
    }
}

/// Trains the selection head, one SGD step per scene.
pub fn train_psm(scenes: &[Scene], cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let (d, k) = corpus_shape(scenes)?;
    let batches: Vec<PsmBatch> = scenes
        .iter()
        .map(|s| psm_batch(s, &penalties(s, cfg)))
        .filter(|b| !b.objects.is_empty())
        .collect();
    let init = MilHeadParams::new(d, cfg.train.hidden, k, cfg.train.seed);
    sgd_train(init, &batches, &cfg.train, psm_loss_and_grads)
}

pub(crate) fn corpus_shape(scenes: &[Scene]) -> Result<(usize, usize)> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::config("corpus", "no scenes to train on"))?;
    let (d, k) = (first.feature_dim, first.num_classes);
    if scenes.iter().any(|s| s.feature_dim != d || s.num_classes != k) {
        return Err(Error::config("corpus", "scenes disagree on feature_dim or num_classes"));
    }
    Ok((d, k))
}

/// A chosen proposal and the scores it was chosen from.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub bbox: BBox,
    pub score: f64,
    pub scores: ScoreTensor,
}

/// Picks the proposal with the highest fused score in the `class_id` column.
pub fn select_box_psm(params: &MilHeadParams, bag: &ProposalBag, s_dis: &[f64], class_id: usize) -> Result<Selection> {
    if bag.is_empty() {
        return Err(Error::EmptyBag);
    }
    let scores = forward_scores(params, bag, s_dis)?;
    pick(scores, &bag.boxes(), class_id)
}

/// Same rule over an explicit feature matrix and box list.
pub fn select_from(params: &MilHeadParams, features: &Mat, boxes: &[BBox], s_dis: &[f64], class_id: usize) -> Result<Selection> {
    if boxes.is_empty() {
        return Err(Error::EmptyBag);
    }
    pick(forward_features(params, features, s_dis)?, boxes, class_id)
}

fn pick(scores: ScoreTensor, boxes: &[BBox], class_id: usize) -> Result<Selection> {
    let column = scores.class_scores(class_id);
    let index = argmax_lowest(&column).ok_or(Error::EmptyBag)?;
    Ok(Selection {
        index,
        bbox: boxes[index],
        score: column[index],
        scores,
    })
}
