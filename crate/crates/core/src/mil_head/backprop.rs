//! Reverse-mode gradients of the selection and refinement losses.

use super::loss::{
    bce, bce_grad, class_weight, focal_grad, focal_loss, loss_neg, loss_prm, neg_term_grad,
};
use super::{softmax_rows, Affine, Mat, MilHeadParams, ScoreTensor, TrunkCache};
use crate::error::Result;
use serde::{Deserialize, Serialize};

/// One bag of the selection stage.
#[derive(Debug, Clone)]
pub struct PsmObject {
    pub features: Mat,
    pub s_dis: Vec<f64>,
    pub class_id: usize,
}

/// All objects of one scene; the unit of an SGD step.
#[derive(Debug, Clone, Default)]
pub struct PsmBatch {
    pub objects: Vec<PsmObject>,
}

/// One augmented positive bag of the refinement stage.
#[derive(Debug, Clone)]
pub struct PrmObject {
    pub features: Mat,
    pub s_dis: Vec<f64>,
    pub class_id: usize,
    /// Selection-stage bag score of the annotated class; a constant here.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct PrmBatch {
    pub objects: Vec<PrmObject>,
    /// `|U| × D` features of negatives; may have zero rows.
    pub negatives: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_psm: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_prm: f64,
    /// `λ · l_psm + l_prm`
    pub total: f64,
}

fn accumulate_affine(grad: &mut Affine, d_out: &Mat, input: &Mat) {
    for r in 0..d_out.rows {
        let x = input.row(r);
        for o in 0..d_out.cols {
            let g = d_out.at(r, o);
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let w = &mut grad.weight[o * grad.inputs..(o + 1) * grad.inputs];
            for (wi, xi) in w.iter_mut().zip(x) {
                *wi += g * xi;
            }
        }
    }
}

/// `d_in = d_out · W`
fn back_through(layer: &Affine, d_out: &Mat) -> Mat {
    let mut d_in = Mat::zeros(d_out.rows, layer.inputs);
    for r in 0..d_out.rows {
        for o in 0..layer.outputs {
            let g = d_out.at(r, o);
            if g == 0.0 {
                continue;
            }
            let w = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
            for (i, wi) in w.iter().enumerate() {
                *d_in.at_mut(r, i) += g * wi;
            }
        }
    }
    d_in
}

fn relu_mask(d: &mut Mat, z: &Mat) {
    for (g, zv) in d.data.iter_mut().zip(&z.data) {
        if *zv <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Propagates head-logit gradients down through the trunk.
fn backward(params: &MilHeadParams, cache: &TrunkCache, d_zc: &Mat, d_zi: Option<&Mat>, grads: &mut MilHeadParams) {
    accumulate_affine(&mut grads.cls, d_zc, &cache.a2);
    let mut d_a2 = back_through(&params.cls, d_zc);
    if let Some(d_zi) = d_zi {
        accumulate_affine(&mut grads.ins, d_zi, &cache.a2);
        let extra = back_through(&params.ins, d_zi);
        d_a2.data.iter_mut().zip(&extra.data).for_each(|(a, b)| *a += b);
    }
    relu_mask(&mut d_a2, &cache.z2);
    accumulate_affine(&mut grads.fc2, &d_a2, &cache.a1);
    let mut d_a1 = back_through(&params.fc2, &d_a2);
    relu_mask(&mut d_a1, &cache.z1);
    accumulate_affine(&mut grads.fc1, &d_a1, &cache.x);
}

/// Row-softmax backward: `dz = s ⊙ (ds − Σ_j ds_j s_j)` per row.
fn softmax_rows_backward(s: &Mat, ds: &Mat) -> Mat {
    let mut dz = Mat::zeros(s.rows, s.cols);
    for r in 0..s.rows {
        let dot: f64 = (0..s.cols).map(|c| ds.at(r, c) * s.at(r, c)).sum();
        for c in 0..s.cols {
            *dz.at_mut(r, c) = s.at(r, c) * (ds.at(r, c) - dot);
        }
    }
    dz
}

fn softmax_cols_backward(s: &Mat, ds: &Mat) -> Mat {
    let mut dz = Mat::zeros(s.rows, s.cols);
    for c in 0..s.cols {
        let dot: f64 = (0..s.rows).map(|r| ds.at(r, c) * s.at(r, c)).sum();
        for r in 0..s.rows {
            *dz.at_mut(r, c) = s.at(r, c) * (ds.at(r, c) - dot);
        }
    }
    dz
}

struct BagForward {
    cache: TrunkCache,
    scores: ScoreTensor,
}

fn bag_forward(params: &MilHeadParams, features: &Mat, s_dis: &[f64]) -> BagForward {
    let cache = params.trunk(features);
    let scores = ScoreTensor::from_logits(&params.cls.forward(&cache.a2), &params.ins.forward(&cache.a2), s_dis);
    BagForward { cache, scores }
}

/// Backpropagates `dL/dŜ` of one bag into `grads`.
fn bag_backward(params: &MilHeadParams, f: &BagForward, d_bag: &[f64], grads: &mut MilHeadParams) {
    let sc = &f.scores;
    let (m, k) = (sc.s.rows, sc.s.cols);
    let mut d_cls = Mat::zeros(m, k);
    let mut d_ins = Mat::zeros(m, k);
    for r in 0..m {
        for c in 0..k {
            let g = d_bag[c] * sc.s_dis[r];
            *d_cls.at_mut(r, c) = g * sc.s_ins.at(r, c);
            *d_ins.at_mut(r, c) = g * sc.s_cls.at(r, c);
        }
    }
    let d_zc = softmax_rows_backward(&sc.s_cls, &d_cls);
    let d_zi = softmax_cols_backward(&sc.s_ins, &d_ins);
    backward(params, &f.cache, &d_zc, Some(&d_zi), grads);
}

/// Selection loss of a batch and its gradient.
pub fn psm_loss_and_grads(params: &MilHeadParams, batch: &PsmBatch) -> Result<(f64, MilHeadParams)> {
    let mut grads = params.zeros_like();
    let n = batch.objects.len();
    if n == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for obj in &batch.objects {
        let f = bag_forward(params, &obj.features, &obj.s_dis);
        loss += bce(&f.scores.bag, obj.class_id) * scale;
        let d_bag: Vec<f64> = bce_grad(&f.scores.bag, obj.class_id)
            .into_iter()
            .map(|g| g * scale)
            .collect();
        bag_backward(params, &f, &d_bag, &mut grads);
    }
    grads.check_finite()?;
    Ok((loss, grads))
}

/// Refinement loss `α·L_pos + (1−α)·L_neg` of a batch and its gradient.
///
/// Returns `(l_pos, l_neg, l_prm)`. Negatives only pass through the
/// classification branch; `β` is the mean of the object weights.
pub fn prm_loss_and_grads(
    params: &MilHeadParams,
    batch: &PrmBatch,
    alpha: f64,
    focal_gamma: f64,
) -> Result<((f64, f64, f64), MilHeadParams)> {
    let mut grads = params.zeros_like();
    let n = batch.objects.len();
    let mut l_pos = 0.0;
    let mut beta = 0.0;
    if n > 0 {
        let scale = 1.0 / n as f64;
        for obj in &batch.objects {
            beta += obj.weight * scale;
            let f = bag_forward(params, &obj.features, &obj.s_dis);
            l_pos += obj.weight * focal_loss(&f.scores.bag, obj.class_id, focal_gamma) * scale;
            let coef = alpha * obj.weight * scale;
            if coef != 0.0 {
                let d_bag: Vec<f64> = focal_grad(&f.scores.bag, obj.class_id, focal_gamma)
                    .into_iter()
                    .map(|g| g * coef)
                    .collect();
                bag_backward(params, &f, &d_bag, &mut grads);
            }
        }
    }
    let negs = &batch.negatives;
    let mut l_neg = 0.0;
    if negs.rows > 0 {
        let cache = params.trunk(negs);
        let s = softmax_rows(&params.cls.forward(&cache.a2));
        let rows: Vec<Vec<f64>> = (0..s.rows).map(|r| s.row(r).to_vec()).collect();
        l_neg = loss_neg(&rows, beta);
        let coef = (1.0 - alpha) * beta / negs.rows as f64;
        if coef != 0.0 {
            let ds = Mat {
                rows: s.rows,
                cols: s.cols,
                data: s.data.iter().map(|&v| coef * neg_term_grad(v)).collect(),
            };
            let d_zc = softmax_rows_backward(&s, &ds);
            backward(params, &cache, &d_zc, None, &mut grads);
        }
    }
    grads.check_finite()?;
    Ok(((l_pos, l_neg, loss_prm(l_pos, l_neg, alpha)), grads))
}

/// Both stages at once: `λ·L_psm + L_prm`.
///
/// The refinement weights `⟨c_i, Ŝ_i⟩` are recomputed from `psm` on the
/// selection bags of `psm_batch` (index-aligned with `prm_batch.objects`)
/// and treated as constants, so the selection head only receives gradient
/// from `λ·L_psm`.
pub fn combined_loss(
    psm: &MilHeadParams,
    prm: &MilHeadParams,
    psm_batch: &PsmBatch,
    prm_batch: &PrmBatch,
    lambda: f64,
    alpha: f64,
    focal_gamma: f64,
) -> Result<(LossBreakdown, MilHeadParams, MilHeadParams)> {
    let (l_psm, mut psm_grads) = psm_loss_and_grads(psm, psm_batch)?;
    psm_grads = {
        let mut scaled = psm_grads.zeros_like();
        scaled.add_scaled(&psm_grads, lambda);
        scaled
    };
    let mut batch = prm_batch.clone();
    for (obj, sel) in batch.objects.iter_mut().zip(&psm_batch.objects) {
        let scores = bag_forward(psm, &sel.features, &sel.s_dis).scores;
        obj.weight = class_weight(&scores.bag, obj.class_id);
    }
    let ((l_pos, l_neg, l_prm), prm_grads) = prm_loss_and_grads(prm, &batch, alpha, focal_gamma)?;
    Ok((
        LossBreakdown {
            l_psm,
            l_pos,
            l_neg,
            l_prm,
            total: lambda * l_psm + l_prm,
        },
        psm_grads,
        prm_grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil_head::loss::{loss_pos, loss_psm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn psm_batch(rng: &mut ChaCha8Rng, d: usize, k: usize) -> PsmBatch {
        PsmBatch {
            objects: (0..2)
                .map(|_| PsmObject {
                    features: random_mat(rng, 5, d),
                    s_dis: (0..5).map(|_| rng.gen_range(0.5..=1.0)).collect(),
                    class_id: rng.gen_range(0..k),
                })
                .collect(),
        }
    }

    #[test]
    fn loss_values_agree_with_scalar_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MilHeadParams::new(8, 16, 3, 5);
        let batch = psm_batch(&mut rng, 8, 3);
        let bags: Vec<Vec<f64>> = batch
            .objects
            .iter()
            .map(|o| bag_forward(&p, &o.features, &o.s_dis).scores.bag)
            .collect();
        let classes: Vec<usize> = batch.objects.iter().map(|o| o.class_id).collect();
        let (l, _) = psm_loss_and_grads(&p, &batch).unwrap();
        assert!((l - loss_psm(&bags, &classes)).abs() < 1e-12);

        let prm = PrmBatch {
            objects: batch
                .objects
                .iter()
                .map(|o| PrmObject {
                    features: o.features.clone(),
                    s_dis: o.s_dis.clone(),
                    class_id: o.class_id,
                    weight: 0.6,
                })
                .collect(),
            negatives: Mat::zeros(0, 8),
        };
        let ((l_pos, l_neg, l_prm), _) = prm_loss_and_grads(&p, &prm, 0.25, 2.0).unwrap();
        let psm_like: Vec<Vec<f64>> = classes.iter().map(|&c| {
            let mut v = vec![0.0; 3];
            v[c] = 0.6;
            v
        }).collect();
        assert!((l_pos - loss_pos(&bags, &psm_like, &classes, 2.0)).abs() < 1e-12);
        assert_eq!(l_neg, 0.0);
        assert!((l_prm - 0.25 * l_pos).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_with_symmetric_inputs_give_symmetric_gradients() {
        let mut p = MilHeadParams::new(4, 6, 2, 0);
        let zero = p.zeros_like();
        p = zero.clone();
        p.fc1.bias.iter_mut().for_each(|b| *b = 0.5);
        p.fc2.bias.iter_mut().for_each(|b| *b = 0.5);
        let batch = PsmBatch {
            objects: vec![PsmObject {
                features: Mat::from_rows(&[vec![1.0; 4], vec![1.0; 4]]),
                s_dis: vec![1.0, 1.0],
                class_id: 0,
            }],
        };
        let (_, g) = psm_loss_and_grads(&p, &batch).unwrap();
        // classes 0 and 1 receive opposite pushes; hidden units are interchangeable
        for h in 0..6 {
            assert!((g.cls.weight[h] + g.cls.weight[6 + h]).abs() < 1e-15);
            assert_eq!(g.cls.weight[h], g.cls.weight[0]);
        }
        assert!(g.fc1.weight.iter().all(|&w| w == g.fc1.weight[0]));
    }

    #[test]
    fn selection_head_is_detached_from_positive_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let psm = MilHeadParams::new(8, 16, 3, 1);
        let prm = MilHeadParams::new(8, 16, 3, 2);
        let sel = psm_batch(&mut rng, 8, 3);
        let refine = PrmBatch {
            objects: sel
                .objects
                .iter()
                .map(|o| PrmObject {
                    features: random_mat(&mut rng, 7, 8),
                    s_dis: vec![1.0; 7],
                    class_id: o.class_id,
                    weight: 0.0,
                })
                .collect(),
            negatives: random_mat(&mut rng, 4, 8),
        };
        let (breakdown, psm_grads, prm_grads) = combined_loss(&psm, &prm, &sel, &refine, 0.0, 0.25, 2.0).unwrap();
        assert!(breakdown.l_pos > 0.0);
        assert!(psm_grads.iter().all(|g| g == 0.0));
        assert!(prm_grads.iter().any(|g| g != 0.0));
        assert!((breakdown.total - breakdown.l_prm).abs() < 1e-15);
    }
}
