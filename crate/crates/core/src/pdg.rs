//! Point distance guidance: proposals that swallow other annotated points of
//! the same class get their scores damped.

use serde::{Deserialize, Serialize};

use crate::data_model::{DistanceForm, Scene};
use crate::geometry::{BBox, Point2D};

/// Indices of the other same-class annotations whose point lies inside `proposal`.
///
/// Containment is closed: a point on the edge counts.
pub fn overlap_indicator(proposal: &BBox, others: &[Point2D]) -> Vec<bool> {
    others.iter().map(|p| proposal.contains_point(p)).collect()
}

/// Sum of distances from `own` to every overlapped point.
pub fn w_dis(own: &Point2D, others: &[Point2D], overlapped: &[bool]) -> f64 {
    others
        .iter()
        .zip(overlapped)
        .filter(|(_, &t)| t)
        .map(|(p, _)| own.distance(p))
        .sum()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `σ(1/w)^d`, exactly 1 at `w = 0`.
pub fn s_dis(w: f64, d: f64) -> f64 {
    if w == 0.0 {
        1.0
    } else {
        logistic(1.0 / w).powf(d)
    }
}

/// `min(1, scale · e^{d/w})`, exactly 1 at `w = 0`.
pub fn s_dis_exponential(w: f64, d: f64, scale: f64) -> f64 {
    if w == 0.0 {
        1.0
    } else {
        (scale * (d / w).exp()).min(1.0)
    }
}

pub fn distance_score(w: f64, d: f64, form: DistanceForm) -> f64 {
    match form {
        DistanceForm::Sigmoid => s_dis(w, d),
        DistanceForm::Exponential { scale } => s_dis_exponential(w, d, scale),
    }
}

/// Per-proposal penalty record of one bag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistancePenalty {
    /// For each proposal, the annotation indices whose point it contains.
    pub overlaps: Vec<Vec<usize>>,
    pub w_dis: Vec<f64>,
    pub s_dis: Vec<f64>,
}

impl DistancePenalty {
    /// The neutral penalty used when guidance is off.
    pub fn neutral(len: usize) -> Self {
        Self {
            overlaps: vec![Vec::new(); len],
            w_dis: vec![0.0; len],
            s_dis: vec![1.0; len],
        }
    }
}

/// Penalty for arbitrary boxes attached to annotation `i` of `scene`.
pub fn penalty_for_boxes(scene: &Scene, i: usize, boxes: &[BBox], d: f64, form: DistanceForm) -> DistancePenalty {
    let own = &scene.annotations[i];
    let (idx, pts): (Vec<usize>, Vec<Point2D>) = scene
        .annotations
        .iter()
        .enumerate()
        .filter(|(j, a)| *j != i && a.class_id == own.class_id)
        .map(|(j, a)| (j, a.point))
        .unzip();
    let mut out = DistancePenalty {
        overlaps: Vec::with_capacity(boxes.len()),
        w_dis: Vec::with_capacity(boxes.len()),
        s_dis: Vec::with_capacity(boxes.len()),
    };
    for b in boxes {
        let t = overlap_indicator(b, &pts);
        let w = w_dis(&own.point, &pts, &t);
        out.overlaps.push(idx.iter().zip(&t).filter(|(_, &x)| x).map(|(&j, _)| j).collect());
        out.w_dis.push(w);
        out.s_dis.push(distance_score(w, d, form));
    }
    out
}

/// Penalties of every bag in `scene`, or neutral ones when `enabled` is false.
pub fn scene_penalties(scene: &Scene, d: f64, form: DistanceForm, enabled: bool) -> Vec<DistancePenalty> {
    scene
        .bags
        .iter()
        .enumerate()
        .map(|(i, bag)| {
            if enabled {
                penalty_for_boxes(scene, i, &bag.boxes(), d, form)
            } else {
                DistancePenalty::neutral(bag.len())
            }
        })
        .collect()
}
