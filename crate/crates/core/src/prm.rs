//! Second-stage refinement: train on augmented bags and negatives, pick
//! `box_select`, mine a larger box around it and map it back to a mask.

use crate::data_model::{PipelineConfig, Proposal};
use crate::error::{Error, Result};
use crate::geometry::{box_contains, box_iou, mask_iou, min_bounding_rect, weighted_box_merge, BBox, MaskRle};
use crate::mil_head::{prm_loss_and_grads, sgd_train, Mat, MilHeadParams, PrmBatch, TrainOutcome};
use crate::psm::{select_from, Selection};

/// Seed offset so the two heads never share a batch order.
const PRM_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Trains the refinement head from the trained selection head `init`, one
/// SGD step per scene batch.
pub fn train_prm(batches: &[PrmBatch], init: &MilHeadParams, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let init = init.clone();
    let mut train = cfg.train;
    train.seed ^= PRM_SEED_SALT;
    sgd_train(init, batches, &train, |p, b| {
        let ((_, _, l_prm), g) = prm_loss_and_grads(p, b, cfg.alpha, cfg.focal_gamma)?;
        Ok((l_prm, g))
    })
}

/// Argmax of the refinement scores over the augmented bag.
pub fn select_box_select(params: &MilHeadParams, features: &Mat, bag_plus: &[BBox], s_dis: &[f64], class_id: usize) -> Result<Selection> {
    select_from(params, features, bag_plus, s_dis, class_id)
}

/// Indices of the `k` highest scores, best first; lower index first on ties.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    order
}

/// Grows `box_select` toward larger confident proposals.
///
/// A larger proposal overlapping by more than the running `t_min1` is merged
/// with weight `(1, iou)` and raises `t_min1`. Before any such merge, a
/// larger proposal enclosing `box_select` with IoU above the running `t_min2`
/// is merged with weight `(iou, 1)` and raises `t_min2`.
pub fn box_mining(bag_plus: &[BBox], prm_scores: &[f64], box_select: &BBox, k: usize, t_min1: f64, t_min2: f64) -> BBox {
    let (mut t1, mut t2) = (t_min1, t_min2);
    let mut count = 0usize;
    let mut out = *box_select;
    let sel_area = box_select.area();
    for j in top_k(prm_scores, k) {
        let p = &bag_plus[j];
        if p.area() <= sel_area {
            continue;
        }
        let iou = box_iou(p, box_select);
        if iou > t1 {
            out = weighted_box_merge(p, box_select, 1.0, iou);
            t1 = iou;
            count += 1;
        } else if count == 0 && box_contains(p, box_select) && iou > t2 {
            out = weighted_box_merge(p, box_select, iou, 1.0);
            t2 = iou;
        }
    }
    out
}

/// Index and mask of the original proposal whose mask's bounding box best
/// matches `box_prm`; lowest index on ties.
pub fn map_mask_prm(box_prm: &BBox, originals: &[Proposal]) -> Result<(usize, MaskRle)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in originals.iter().enumerate() {
        let Some(mask) = &p.mask else { continue };
        let Ok(rect) = min_bounding_rect(mask) else { continue };
        let iou = box_iou(&rect, box_prm);
        if best.map_or(true, |(_, v)| iou > v) {
            best = Some((i, iou));
        }
    }
    let (i, _) = best.ok_or(Error::NoMaskAvailable)?;
    Ok((i, originals[i].mask.clone().expect("mask checked above")))
}

/// Highest, lower-median and lowest scored masks other than `mask_prm`.
pub fn mps_select(originals: &[Proposal], prm_scores: &[f64], mask_prm: &MaskRle) -> Result<Vec<usize>> {
    let mut candidates = Vec::new();
    for (i, p) in originals.iter().enumerate() {
        if let Some(m) = &p.mask {
            if mask_iou(m, mask_prm)? < 1.0 {
                candidates.push(i);
            }
        }
    }
    candidates.sort_by(|&a, &b| prm_scores[b].total_cmp(&prm_scores[a]));
    let n = candidates.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut picks: Vec<usize> = Vec::with_capacity(3);
    for pos in [0, n - 1 - (n - 1) / 2, n - 1] {
        let idx = candidates[pos];
        if !picks.contains(&idx) {
            picks.push(idx);
        }
    }
    Ok(picks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &BBox, b: &BBox, tol: f64) -> bool {
        <[f64; 4]>::from(*a)
            .iter()
            .zip(<[f64; 4]>::from(*b))
            .all(|(x, y)| (x - y).abs() <= tol)
    }

    fn masked(x0: u32, y0: u32, x1: u32, y1: u32) -> Proposal {
        let m = MaskRle::from_fn(16, 16, |r, c| (y0..y1).contains(&r) && (x0..x1).contains(&c));
        Proposal {
            bbox: BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64),
            mask: Some(m),
            feature: vec![],
        }
    }

    fn toy_batches() -> Vec<PrmBatch> {
        // class is linearly encoded in the first two feature coordinates
        (0..8)
            .map(|i| {
                let class_id = i % 2;
                let mut a = vec![0.1; 4];
                a[class_id] = 1.0;
                PrmBatch {
                    objects: vec![crate::mil_head::PrmObject {
                        features: Mat::from_rows(&[a, vec![0.2, 0.2, 0.5, 0.1]]),
                        s_dis: vec![1.0, 1.0],
                        class_id,
                        weight: 0.8,
                    }],
                    negatives: Mat::zeros(0, 4),
                }
            })
            .collect()
    }

    #[test]
    fn toy_refinement_loss_halves_in_fifty_epochs_without_negatives() {
        let mut cfg = PipelineConfig::default();
        cfg.train.epochs = 50;
        cfg.train.learning_rate = 1.0;
        let run = || train_prm(&toy_batches(), &MilHeadParams::new(4, 8, 2, 1), &cfg).unwrap();
        let a = run();
        assert!(a.curve[49] <= 0.5 * a.curve[0], "{:?}", a.curve);
        assert_eq!(a, run());
    }

    #[test]
    fn mining_falls_through_without_larger_proposals() {
        let sel = BBox::new(0.0, 0.0, 10.0, 10.0);
        let bag = [sel, BBox::new(0.0, 0.0, 5.0, 5.0)];
        assert_eq!(box_mining(&bag, &[0.9, 0.8], &sel, 3, 0.6, 0.3), sel);
    }

    #[test]
    fn mining_expands_on_high_overlap() {
        let sel = BBox::new(0.0, 0.0, 10.0, 10.0);
        let bag = [sel, BBox::new(0.0, 0.0, 12.0, 12.0)];
        let iou: f64 = 100.0 / 144.0;
        let out = box_mining(&bag, &[0.9, 0.8], &sel, 3, 0.6, 0.3);
        let side = (12.0 + 10.0 * iou) / (1.0 + iou);
        assert!(close(&out, &BBox::new(0.0, 0.0, side, side), 1e-12));
        assert!((side - 11.1803).abs() < 1e-3);
    }

    #[test]
    fn mining_enclosing_branch_respects_threshold() {
        let sel = BBox::new(0.0, 0.0, 10.0, 10.0);
        let bag = [sel, BBox::new(0.0, 0.0, 20.0, 20.0)];
        assert_eq!(box_mining(&bag, &[0.9, 0.8], &sel, 3, 0.6, 0.3), sel);
        let out = box_mining(&bag, &[0.9, 0.8], &sel, 3, 0.6, 0.2);
        assert!(close(&out, &BBox::new(0.0, 0.0, 12.0, 12.0), 1e-12));
    }

    #[test]
    fn mining_only_looks_at_top_k() {
        let sel = BBox::new(0.0, 0.0, 10.0, 10.0);
        let bag = [sel, BBox::new(50.0, 50.0, 60.0, 60.0), BBox::new(0.0, 0.0, 12.0, 12.0)];
        assert_eq!(box_mining(&bag, &[0.9, 0.8, 0.1], &sel, 2, 0.6, 0.3), sel);
        assert_ne!(box_mining(&bag, &[0.9, 0.8, 0.1], &sel, 3, 0.6, 0.3), sel);
    }

    #[test]
    fn enclosing_branch_is_blocked_after_an_overlap_merge() {
        let sel = BBox::new(0.0, 0.0, 10.0, 10.0);
        let bag = [sel, BBox::new(0.0, 0.0, 11.0, 11.0), BBox::new(0.0, 0.0, 14.0, 14.0)];
        let out = box_mining(&bag, &[0.9, 0.8, 0.7], &sel, 3, 0.6, 0.3);
        let iou: f64 = 100.0 / 121.0;
        let side = (11.0 + 10.0 * iou) / (1.0 + iou);
        assert!(close(&out, &BBox::new(0.0, 0.0, side, side), 1e-12));
    }

    #[test]
    fn mask_mapping_examples() {
        let props = vec![masked(0, 0, 4, 4), masked(2, 2, 10, 10), masked(2, 2, 10, 10)];
        let (i, m) = map_mask_prm(&BBox::new(2.0, 2.0, 10.0, 10.0), &props).unwrap();
        assert_eq!(i, 1);
        assert_eq!(Some(m), props[1].mask);
        let (i, _) = map_mask_prm(&BBox::new(0.0, 0.0, 1.0, 1.0), &props[1..2]).unwrap();
        assert_eq!(i, 0);
        let bare = vec![Proposal {
            mask: None,
            ..masked(0, 0, 4, 4)
        }];
        assert!(matches!(map_mask_prm(&BBox::new(0.0, 0.0, 4.0, 4.0), &bare), Err(Error::NoMaskAvailable)));
    }

    #[test]
    fn mask_mapping_tie_goes_to_first_best() {
        // bounding-box IoUs against (0,0,10,10): 0.16, 0.9, 0.9
        let props = vec![masked(0, 0, 4, 4), masked(0, 0, 10, 9), masked(0, 1, 10, 10)];
        assert_eq!(map_mask_prm(&BBox::new(0.0, 0.0, 10.0, 10.0), &props).unwrap().0, 1);
    }

    #[test]
    fn mps_examples() {
        let own = masked(0, 0, 4, 4);
        let mask_prm = own.mask.clone().unwrap();
        assert!(mps_select(&[own.clone()], &[0.5], &mask_prm).unwrap().is_empty());
        let props = vec![own, masked(0, 0, 5, 5), masked(0, 0, 6, 6), masked(0, 0, 7, 7), masked(0, 0, 8, 8)];
        let scores = [1.0, 0.4, 0.9, 0.1, 0.7];
        assert_eq!(mps_select(&props, &scores, &mask_prm).unwrap(), vec![2, 1, 3]);
        assert_eq!(mps_select(&props[..2], &scores[..2], &mask_prm).unwrap(), vec![1]);
        assert_eq!(mps_select(&props[..3], &scores[..3], &mask_prm).unwrap(), vec![2, 1]);
    }

    proptest! {
        #[test]
        fn mined_box_stays_in_hull(
            sel in (0.0..20.0f64, 0.0..20.0f64, 1.0..20.0f64, 1.0..20.0f64),
            others in proptest::collection::vec((0.0..30.0f64, 0.0..30.0f64, 1.0..30.0f64, 1.0..30.0f64, 0.0..1.0f64), 0..8),
            k in 1usize..5,
        ) {
            let s = BBox::new(sel.0, sel.1, sel.0 + sel.2, sel.1 + sel.3);
            let mut bag = vec![s];
            let mut scores = vec![1.0];
            for &(x, y, w, h, sc) in &others {
                bag.push(BBox::new(x, y, x + w, y + h));
                scores.push(sc);
            }
            let out = box_mining(&bag, &scores, &s, k, 0.6, 0.3);
            let hull = bag.iter().fold(s, |h, b| BBox::new(h.x0.min(b.x0), h.y0.min(b.y0), h.x1.max(b.x1), h.y1.max(b.y1)));
            prop_assert!(box_contains(&hull, &out) || close(&out, &s, 0.0));
            prop_assert!(out.is_valid());
        }

        #[test]
        fn mps_never_returns_mask_prm(sizes in proptest::collection::vec(1u32..16, 1..8), scores in proptest::collection::vec(0.0..1.0f64, 8)) {
            let props: Vec<Proposal> = sizes.iter().map(|&s| masked(0, 0, s, s)).collect();
            let mask_prm = props[0].mask.clone().unwrap();
            let picks = mps_select(&props, &scores[..props.len()], &mask_prm).unwrap();
            prop_assert!(picks.len() <= 3);
            for (n, &i) in picks.iter().enumerate() {
                prop_assert!(props[i].mask.as_ref() != Some(&mask_prm));
                prop_assert!(!picks[..n].contains(&i));
            }
        }
    }
}
