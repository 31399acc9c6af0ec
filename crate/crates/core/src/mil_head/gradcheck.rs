//! Central finite-difference audit of the analytic gradients.
//!
//! Loss values here are recomputed from the forward scores and the scalar
//! loss definitions; nothing in this module touches the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    classify, forward_features, loss_neg, loss_pos, loss_prm, loss_psm, prm_loss_and_grads,
    psm_loss_and_grads, Mat, MilHeadParams, PrmBatch, PrmObject, PsmBatch, PsmObject,
};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are
/// zero up to round-off do not inflate it.
pub const REL_FLOOR: f64 = 1e-6;
/// Instances with any trunk pre-activation closer than this to the ReLU kink are redrawn.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Psm,
    Pos,
    Neg,
    Prm,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Psm, Objective::Pos, Objective::Neg, Objective::Prm];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Psm => "loss_psm",
            Objective::Pos => "loss_pos",
            Objective::Neg => "loss_neg",
            Objective::Prm => "loss_prm",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceShape {
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub proposals: usize,
    pub objects: usize,
    pub negatives: usize,
}

impl Default for InstanceShape {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            hidden: 16,
            num_classes: 3,
            proposals: 5,
            objects: 2,
            negatives: 4,
        }
    }
}

/// A random head plus one batch for each stage.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: MilHeadParams,
    pub psm: PsmBatch,
    pub prm: PrmBatch,
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

fn near_kink(params: &MilHeadParams, x: &Mat) -> bool {
    let t = params.trunk(x);
    t.z1.data.iter().chain(&t.z2.data).any(|z| z.abs() < KINK_MARGIN)
}

impl Instance {
    pub fn random(shape: InstanceShape, rng: &mut ChaCha8Rng) -> Instance {
        loop {
            let params = MilHeadParams::new(shape.feature_dim, shape.hidden, shape.num_classes, rng.gen());
            let objects: Vec<(Mat, Vec<f64>, usize, f64)> = (0..shape.objects)
                .map(|_| {
                    (
                        random_mat(rng, shape.proposals, shape.feature_dim),
                        (0..shape.proposals).map(|_| rng.gen_range(0.5..=1.0)).collect(),
                        rng.gen_range(0..shape.num_classes),
                        rng.gen_range(0.05..1.0),
                    )
                })
                .collect();
            let negatives = random_mat(rng, shape.negatives, shape.feature_dim);
            if objects.iter().any(|o| near_kink(&params, &o.0)) || near_kink(&params, &negatives) {
                continue;
            }
            let psm = PsmBatch {
                objects: objects
                    .iter()
                    .map(|(f, s, c, _)| PsmObject {
                        features: f.clone(),
                        s_dis: s.clone(),
                        class_id: *c,
                    })
                    .collect(),
            };
            let prm = PrmBatch {
                objects: objects
                    .into_iter()
                    .map(|(features, s_dis, class_id, weight)| PrmObject {
                        features,
                        s_dis,
                        class_id,
                        weight,
                    })
                    .collect(),
                negatives,
            };
            return Instance { params, psm, prm };
        }
    }
}

fn alpha_for(objective: Objective, alpha: f64) -> f64 {
    match objective {
        Objective::Pos => 1.0,
        Objective::Neg => 0.0,
        _ => alpha,
    }
}

/// Forward-only loss value used by the difference quotients.
pub fn objective_value(objective: Objective, params: &MilHeadParams, inst: &Instance, alpha: f64, focal_gamma: f64) -> f64 {
    if objective == Objective::Psm {
        let bags: Vec<Vec<f64>> = inst
            .psm
            .objects
            .iter()
            .map(|o| forward_features(params, &o.features, &o.s_dis).expect("shapes match").bag)
            .collect();
        let classes: Vec<usize> = inst.psm.objects.iter().map(|o| o.class_id).collect();
        return loss_psm(&bags, &classes);
    }
    let objs = &inst.prm.objects;
    let prm_bags: Vec<Vec<f64>> = objs
        .iter()
        .map(|o| forward_features(params, &o.features, &o.s_dis).expect("shapes match").bag)
        .collect();
    let classes: Vec<usize> = objs.iter().map(|o| o.class_id).collect();
    let weights: Vec<Vec<f64>> = objs
        .iter()
        .map(|o| {
            let mut v = vec![0.0; params.num_classes()];
            v[o.class_id] = o.weight;
            v
        })
        .collect();
    let l_pos = loss_pos(&prm_bags, &weights, &classes, focal_gamma);
    let beta = objs.iter().map(|o| o.weight).sum::<f64>() / objs.len() as f64;
    let s = classify(params, &inst.prm.negatives);
    let rows: Vec<Vec<f64>> = (0..s.rows).map(|r| s.row(r).to_vec()).collect();
    let l_neg = loss_neg(&rows, beta);
    loss_prm(l_pos, l_neg, alpha_for(objective, alpha))
}

pub fn analytic_gradient(objective: Objective, inst: &Instance, alpha: f64, focal_gamma: f64) -> Result<MilHeadParams> {
    Ok(match objective {
        Objective::Psm => psm_loss_and_grads(&inst.params, &inst.psm)?.1,
        _ => prm_loss_and_grads(&inst.params, &inst.prm, alpha_for(objective, alpha), focal_gamma)?.1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub objective: Objective,
    pub max_rel_error: f64,
    /// Coordinate name and instance index of the worst error.
    pub worst: (String, usize),
    pub instances: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= MAX_REL_ERROR
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares every gradient coordinate against central differences.
///
/// `corrupt` perturbs one analytic coordinate to exercise the failure path.
pub fn check_objective(
    objective: Objective,
    instances: &[Instance],
    alpha: f64,
    focal_gamma: f64,
    corrupt: bool,
) -> Result<CheckResult> {
    let mut worst = (0.0, String::new(), 0);
    for (idx, inst) in instances.iter().enumerate() {
        let mut grads = analytic_gradient(objective, inst, alpha, focal_gamma)?;
        if corrupt && idx == 0 {
            let g = grads.get(0);
            grads.set(0, g + 1e-2 * g.abs().max(1.0));
        }
        let mut probe = inst.params.clone();
        for i in 0..probe.num_params() {
            let orig = probe.get(i);
            probe.set(i, orig + FD_STEP);
            let up = objective_value(objective, &probe, inst, alpha, focal_gamma);
            probe.set(i, orig - FD_STEP);
            let down = objective_value(objective, &probe, inst, alpha, focal_gamma);
            probe.set(i, orig);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(grads.get(i), numeric);
            if err > worst.0 {
                worst = (err, probe.coordinate_name(i), idx);
            }
        }
    }
    Ok(CheckResult {
        objective,
        max_rel_error: worst.0,
        worst: (worst.1, worst.2),
        instances: instances.len(),
    })
}

/// Runs all four objectives over `count` random instances drawn from `seed`.
pub fn run_gradcheck(seed: u64, count: usize, corrupt: bool) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances: Vec<Instance> = (0..count)
        .map(|_| Instance::random(InstanceShape::default(), &mut rng))
        .collect();
    Objective::ALL
        .iter()
        .map(|&o| check_objective(o, &instances, 0.25, 2.0, corrupt))
        .collect()
}
