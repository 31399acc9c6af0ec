//! Positive and negative proposal generation for the refinement stage.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, BBox};

/// Rejection sampling gives up after this many attempts per requested box.
pub const ATTEMPTS_PER_BOX: usize = 50;
const MIN_BACKGROUND_SIDE: f64 = 4.0;
const MAX_BACKGROUND_FRACTION: f64 = 0.9;
const PART_SIDE_RANGE: (f64, f64) = (0.2, 0.9);

/// Jittered copies of `box_psm`: sizes scaled by `1 ± v/s_dis`, centers
/// shifted by half the size change in either direction, clipped to the scene.
///
/// Order: enlarged/shifted forward, enlarged/shifted back, shrunk/forward,
/// shrunk/back; the first `count` are returned.
pub fn ppg_expand(box_psm: &BBox, s_dis: f64, v: f64, count: usize, width: u32, height: u32) -> Result<Vec<BBox>> {
    let r = v / s_dis;
    if !(r < 1.0) {
        return Err(Error::config("v", format!("v / s_dis = {r} must be < 1")));
    }
    let (cx, cy) = box_psm.center();
    let (w0, h0) = (box_psm.width(), box_psm.height());
    let mut out = Vec::with_capacity(4);
    for scale in [1.0 + r, 1.0 - r] {
        let (w, h) = (scale * w0, scale * h0);
        for dir in [1.0, -1.0] {
            let b = BBox::from_center(cx + dir * (w - w0) / 2.0, cy + dir * (h - h0) / 2.0, w, h);
            out.push(b.clip(width as f64, height as f64));
        }
    }
    out.truncate(count);
    Ok(out)
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

/// Random boxes over the scene overlapping no positive by `t_neg1` IoU or more.
pub fn npg_background(
    width: u32,
    height: u32,
    positives: &[BBox],
    t_neg1: f64,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<BBox> {
    let (wf, hf) = (width as f64, height as f64);
    let mut out = Vec::with_capacity(budget);
    let mut attempts = 0;
    while out.len() < budget && attempts < ATTEMPTS_PER_BOX * budget {
        attempts += 1;
        let (cx, cy) = (rng.gen_range(0.0..wf), rng.gen_range(0.0..hf));
        let w = log_uniform(rng, MIN_BACKGROUND_SIDE, MAX_BACKGROUND_FRACTION * wf);
        let h = log_uniform(rng, MIN_BACKGROUND_SIDE, MAX_BACKGROUND_FRACTION * hf);
        let b = BBox::from_center(cx, cy, w, h).clip(wf, hf);
        if b.area() <= 0.0 {
            continue;
        }
        if positives.iter().all(|p| box_iou(&b, p) < t_neg1) {
            out.push(b);
        }
    }
    out
}

/// Sub-boxes of `box_psm` whose IoU with it stays below `t_neg2`.
pub fn npg_part(box_psm: &BBox, t_neg2: f64, budget: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let mut out = Vec::with_capacity(budget);
    if box_psm.area() <= 0.0 {
        return out;
    }
    let mut attempts = 0;
    while out.len() < budget && attempts < ATTEMPTS_PER_BOX * budget {
        attempts += 1;
        let w = rng.gen_range(PART_SIDE_RANGE.0..PART_SIDE_RANGE.1) * box_psm.width();
        let h = rng.gen_range(PART_SIDE_RANGE.0..PART_SIDE_RANGE.1) * box_psm.height();
        let x0 = box_psm.x0 + rng.gen_range(0.0..=1.0) * (box_psm.width() - w);
        let y0 = box_psm.y0 + rng.gen_range(0.0..=1.0) * (box_psm.height() - h);
        let b = BBox::new(x0, y0, (x0 + w).min(box_psm.x1), (y0 + h).min(box_psm.y1));
        if box_iou(&b, box_psm) < t_neg2 {
            out.push(b);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    Background,
    Part,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Negative {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub kind: NegativeKind,
    /// Object whose selected box a part negative was cut from.
    pub source: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NegativeSet {
    pub entries: Vec<Negative>,
}

impl NegativeSet {
    pub fn boxes(&self) -> Vec<BBox> {
        self.entries.iter().map(|n| n.bbox).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, kind: NegativeKind) -> usize {
        self.entries.iter().filter(|n| n.kind == kind).count()
    }
}

/// Background negatives for the scene followed by part negatives per object.
#[allow(clippy::too_many_arguments)]
pub fn generate_negatives(
    width: u32,
    height: u32,
    positive_bags: &[Vec<BBox>],
    box_psm: &[BBox],
    t_neg1: f64,
    t_neg2: f64,
    background_budget: usize,
    part_budget: usize,
    rng: &mut ChaCha8Rng,
) -> NegativeSet {
    let positives: Vec<BBox> = positive_bags.iter().flatten().copied().collect();
    let mut entries: Vec<Negative> = npg_background(width, height, &positives, t_neg1, background_budget, rng)
        .into_iter()
        .map(|bbox| Negative {
            bbox,
            kind: NegativeKind::Background,
            source: None,
        })
        .collect();
    for (i, b) in box_psm.iter().enumerate() {
        entries.extend(npg_part(b, t_neg2, part_budget, rng).into_iter().map(|bbox| Negative {
            bbox,
            kind: NegativeKind::Part,
            source: Some(i),
        }));
    }
    NegativeSet { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_contains;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ppg_hand_evaluated() {
        let b = BBox::new(10.0, 10.0, 30.0, 30.0);
        let out = ppg_expand(&b, 1.0, 0.1, 4, 100, 100).unwrap();
        let expect = [
            BBox::new(10.0, 10.0, 32.0, 32.0),
            BBox::new(8.0, 8.0, 30.0, 30.0),
            BBox::new(10.0, 10.0, 28.0, 28.0),
            BBox::new(12.0, 12.0, 30.0, 30.0),
        ];
        for (o, e) in out.iter().zip(&expect) {
            for (a, b) in <[f64; 4]>::from(*o).iter().zip(<[f64; 4]>::from(*e)) {
                assert!((a - b).abs() < 1e-12, "{:?} vs {:?}", o, e);
            }
        }
    }

    #[test]
    fn ppg_zero_jitter_and_distance_scaling() {
        let b = BBox::new(10.0, 10.0, 30.0, 30.0);
        assert!(ppg_expand(&b, 1.0, 0.0, 4, 100, 100).unwrap().iter().all(|o| *o == b));
        let w1 = ppg_expand(&b, 1.0, 0.1, 1, 100, 100).unwrap()[0].width();
        let w2 = ppg_expand(&b, 0.5, 0.1, 1, 100, 100).unwrap()[0].width();
        assert!(((w2 - 20.0) - 2.0 * (w1 - 20.0)).abs() < 1e-12);
        assert!(matches!(ppg_expand(&b, 0.1, 0.1, 4, 100, 100), Err(Error::Config { .. })));
        assert_eq!(ppg_expand(&b, 1.0, 0.1, 2, 100, 100).unwrap().len(), 2);
    }

    #[test]
    fn ppg_clips_to_scene() {
        let b = BBox::new(0.0, 0.0, 20.0, 20.0);
        let out = ppg_expand(&b, 1.0, 0.1, 4, 21, 21).unwrap();
        assert_eq!(out[0], BBox::new(0.0, 0.0, 21.0, 21.0));
        assert_eq!(out[1], BBox::new(0.0, 0.0, 20.0, 20.0));
    }

    #[test]
    fn zero_budgets_are_empty() {
        assert!(npg_background(64, 64, &[], 0.3, 0, &mut rng(0)).is_empty());
        assert!(npg_part(&BBox::new(0.0, 0.0, 10.0, 10.0), 0.5, 0, &mut rng(0)).is_empty());
    }

    #[test]
    fn covering_positive_only_admits_small_boxes() {
        // against a full-scene positive the IoU is the area fraction
        let all = BBox::new(0.0, 0.0, 64.0, 64.0);
        let out = npg_background(64, 64, &[all], 0.3, 16, &mut rng(1));
        assert!(out.iter().all(|b| b.area() < 0.3 * all.area()));
        let tight = npg_background(64, 64, &[all], 0.01, 16, &mut rng(1));
        assert!(tight.iter().all(|b| b.area() < 0.01 * all.area()));
    }

    #[test]
    fn half_size_part_has_quarter_iou() {
        let outer = BBox::new(0.0, 0.0, 10.0, 10.0);
        let part = BBox::new(0.0, 0.0, 5.0, 5.0);
        assert_eq!(box_iou(&part, &outer), 0.25);
    }

    #[test]
    fn deterministic_under_seed() {
        let pos = vec![vec![BBox::new(5.0, 5.0, 20.0, 20.0)]];
        let psm = [BBox::new(5.0, 5.0, 20.0, 20.0)];
        let a = generate_negatives(64, 48, &pos, &psm, 0.3, 0.5, 16, 8, &mut rng(9));
        let b = generate_negatives(64, 48, &pos, &psm, 0.3, 0.5, 16, 8, &mut rng(9));
        assert_eq!(a, b);
        assert_eq!(a.count(NegativeKind::Part), 8);
    }

    proptest! {
        #[test]
        fn negatives_respect_thresholds(
            seed in 0u64..1000,
            boxes in proptest::collection::vec((0.0..50.0f64, 0.0..50.0f64, 2.0..30.0f64, 2.0..30.0f64), 1..5),
        ) {
            let pos: Vec<BBox> = boxes.iter().map(|&(x, y, w, h)| BBox::new(x, y, (x + w).min(64.0), (y + h).min(64.0))).collect();
            let set = generate_negatives(64, 64, &[pos.clone()], &pos, 0.3, 0.5, 16, 8, &mut rng(seed));
            for n in &set.entries {
                match n.kind {
                    NegativeKind::Background => prop_assert!(pos.iter().all(|p| box_iou(&n.bbox, p) < 0.3)),
                    NegativeKind::Part => {
                        let src = pos[n.source.unwrap()];
                        prop_assert!(box_contains(&src, &n.bbox));
                        prop_assert!(box_iou(&n.bbox, &src) < 0.5);
                    }
                }
            }
        }
    }
}
