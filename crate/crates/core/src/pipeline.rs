//! End-to-end labeling: selection, proposal generation, refinement, box
//! mining, mask mapping and auxiliary masks.
//!
//! Training is phased. The selection head is trained and frozen first, then
//! the refinement head starts from a copy of it and is trained on bags built
//! from its selections.
//! Labeling runs per scene in parallel and results keep corpus order.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data_model::{save_pseudo_labels, LabelScores, PipelineConfig, PseudoLabel, Scene};
use crate::error::{Error, Result};
use crate::features::{FeatureProvider, SceneFeatures};
use crate::geometry::BBox;
use crate::mil_head::{combined_loss, LossBreakdown, Mat, MilHeadParams, PrmBatch, PrmObject, PsmBatch, PsmObject};
use crate::pdg::penalty_for_boxes;
use crate::pnpg::{generate_negatives, ppg_expand, NegativeSet};
use crate::prm::{box_mining, map_mask_prm, mps_select, select_box_select, train_prm};
use crate::psm::{bag_features, penalties, select_box_psm, train_psm, Selection};
use crate::synth_eval::{evaluate, EvalReport};

/// Trained heads; `prm` is absent when refinement is switched off.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub psm: MilHeadParams,
    pub prm: Option<MilHeadParams>,
}

/// Selection-stage result of one object plus its augmented bag.
#[derive(Debug, Clone)]
pub struct ObjectPrep {
    pub class_id: usize,
    pub psm: Selection,
    pub psm_features: Mat,
    pub psm_s_dis: Vec<f64>,
    /// Selection-stage bag score of the annotated class.
    pub weight: f64,
    /// Original boxes followed by augmented positives.
    pub bag_plus: Vec<BBox>,
    pub features_plus: Mat,
    pub s_dis_plus: Vec<f64>,
    pub diagnostics: Vec<String>,
}

/// Per-object outcome: a prepared object or the reason it could not be prepared.
pub type Prepared = std::result::Result<ObjectPrep, String>;

fn concat_rows(a: &Mat, rows: &[Vec<f64>]) -> Mat {
    let mut data = a.data.clone();
    for r in rows {
        data.extend_from_slice(r);
    }
    Mat {
        rows: a.rows + rows.len(),
        cols: a.cols,
        data,
    }
}

/// Runs the selection head on every bag and builds the augmented bags.
pub fn prepare_scene(scene: &Scene, cfg: &PipelineConfig, psm: &MilHeadParams, provider: &dyn FeatureProvider) -> Vec<Prepared> {
    let pens = penalties(scene, cfg);
    scene
        .bags
        .iter()
        .zip(&scene.annotations)
        .zip(&pens)
        .enumerate()
        .map(|(i, ((bag, ann), pen))| {
            let sel = select_box_psm(psm, bag, &pen.s_dis, ann.class_id).map_err(|e| e.to_string())?;
            let weight = sel.scores.bag[ann.class_id];
            let features = bag_features(bag);
            let mut diagnostics = Vec::new();
            let mut bag_plus = bag.boxes();
            let mut features_plus = features.clone();
            if cfg.toggles.prm && cfg.toggles.pnpg {
                match ppg_expand(&sel.bbox, pen.s_dis[sel.index], cfg.v, cfg.ppg_boxes, scene.width, scene.height) {
                    Ok(extra) => {
                        features_plus = concat_rows(&features, &provider.features(scene, &extra));
                        bag_plus.extend(extra);
                    }
                    Err(e) => diagnostics.push(format!("positive augmentation skipped: {e}")),
                }
            }
            let s_dis_plus = if cfg.toggles.pdg {
                penalty_for_boxes(scene, i, &bag_plus, cfg.d, cfg.distance_form).s_dis
            } else {
                vec![1.0; bag_plus.len()]
            };
            Ok(ObjectPrep {
                class_id: ann.class_id,
                psm: sel,
                psm_features: features,
                psm_s_dis: pen.s_dis.clone(),
                weight,
                bag_plus,
                features_plus,
                s_dis_plus,
                diagnostics,
            })
        })
        .collect()
}

/// Negatives of one scene, seeded by `seed ^ scene_index`.
pub fn scene_negatives(scene: &Scene, scene_index: usize, cfg: &PipelineConfig, preps: &[Prepared]) -> NegativeSet {
    if !(cfg.toggles.prm && cfg.toggles.pnpg) {
        return NegativeSet::default();
    }
    let ok: Vec<&ObjectPrep> = preps.iter().filter_map(|p| p.as_ref().ok()).collect();
    let positives: Vec<Vec<BBox>> = ok.iter().map(|p| p.bag_plus.clone()).collect();
    let selected: Vec<BBox> = ok.iter().map(|p| p.psm.bbox).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ scene_index as u64);
    generate_negatives(
        scene.width,
        scene.height,
        &positives,
        &selected,
        cfg.t_neg1,
        cfg.t_neg2,
        cfg.background_budget,
        cfg.part_budget,
        &mut rng,
    )
}

fn training_batches(scene: &Scene, preps: &[Prepared], negatives: &NegativeSet, provider: &dyn FeatureProvider) -> (PsmBatch, PrmBatch) {
    let ok: Vec<&ObjectPrep> = preps.iter().filter_map(|p| p.as_ref().ok()).collect();
    let psm = PsmBatch {
        objects: ok
            .iter()
            .map(|p| PsmObject {
                features: p.psm_features.clone(),
                s_dis: p.psm_s_dis.clone(),
                class_id: p.class_id,
            })
            .collect(),
    };
    let neg_rows = provider.features(scene, &negatives.boxes());
    let negatives = if neg_rows.is_empty() {
        Mat::zeros(0, scene.feature_dim)
    } else {
        Mat::from_rows(&neg_rows)
    };
    let prm = PrmBatch {
        objects: ok
            .iter()
            .map(|p| PrmObject {
                features: p.features_plus.clone(),
                s_dis: p.s_dis_plus.clone(),
                class_id: p.class_id,
                weight: p.weight,
            })
            .collect(),
        negatives,
    };
    (psm, prm)
}

fn failed_label(scene: &Scene, i: usize, reason: String) -> PseudoLabel {
    let a = &scene.annotations[i];
    let at = BBox::new(a.point.x, a.point.y, a.point.x, a.point.y);
    PseudoLabel {
        instance_id: a.instance_id,
        class_id: a.class_id,
        box_prm: at,
        mask_prm: None,
        aux_masks: Vec::new(),
        psm_box: at,
        select_box: at,
        scores: LabelScores::default(),
        diagnostics: vec![reason],
    }
}

fn label_object(scene: &Scene, i: usize, prep: &ObjectPrep, cfg: &PipelineConfig, prm: Option<&MilHeadParams>) -> PseudoLabel {
    let ann = &scene.annotations[i];
    let originals = &scene.bags[i].proposals;
    let mut diagnostics = prep.diagnostics.clone();
    let (select, bag_plus) = match prm {
        Some(head) => match select_box_select(head, &prep.features_plus, &prep.bag_plus, &prep.s_dis_plus, prep.class_id) {
            Ok(s) => (s, prep.bag_plus.clone()),
            Err(e) => {
                diagnostics.push(format!("refinement failed, using first-stage selection: {e}"));
                (prep.psm.clone(), scene.bags[i].boxes())
            }
        },
        None => (prep.psm.clone(), scene.bags[i].boxes()),
    };
    let prm_scores = select.scores.class_scores(prep.class_id);
    let box_prm = if cfg.toggles.bms {
        box_mining(&bag_plus, &prm_scores, &select.bbox, cfg.k, cfg.t_min1, cfg.t_min2)
    } else {
        select.bbox
    };
    let own_mask = (box_prm == select.bbox)
        .then(|| originals.get(select.index).and_then(|p| p.mask.clone()))
        .flatten();
    let mapped = match own_mask {
        Some(m) => Ok((select.index, m)),
        None => map_mask_prm(&box_prm, originals),
    };
    let (mask_index, mask_prm) = match mapped {
        Ok((idx, m)) => (Some(idx), Some(m)),
        Err(e) => {
            diagnostics.push(e.to_string());
            (None, None)
        }
    };
    let mut aux_indices = Vec::new();
    if cfg.toggles.mps {
        if let Some(m) = &mask_prm {
            match mps_select(originals, &prm_scores[..originals.len()], m) {
                Ok(v) => aux_indices = v,
                Err(e) => diagnostics.push(format!("auxiliary masks skipped: {e}")),
            }
        }
    }
    PseudoLabel {
        instance_id: ann.instance_id,
        class_id: ann.class_id,
        box_prm,
        mask_prm,
        aux_masks: aux_indices
            .iter()
            .filter_map(|&j| originals[j].mask.clone())
            .collect(),
        psm_box: prep.psm.bbox,
        select_box: select.bbox,
        scores: LabelScores {
            psm_index: prep.psm.index,
            psm_score: prep.psm.score,
            psm_s_dis: prep.psm_s_dis[prep.psm.index],
            select_index: select.index,
            select_score: select.score,
            mask_index,
            aux_indices,
            bag_plus,
            prm_scores,
        },
        diagnostics,
    }
}

fn label_prepared(scene: &Scene, preps: &[Prepared], cfg: &PipelineConfig, prm: Option<&MilHeadParams>) -> Vec<PseudoLabel> {
    preps
        .iter()
        .enumerate()
        .map(|(i, p)| match p {
            Ok(prep) => label_object(scene, i, prep, cfg, prm),
            Err(reason) => failed_label(scene, i, reason.clone()),
        })
        .collect()
}

/// Labels one scene with trained heads: one label per annotation.
pub fn run_scene(scene: &Scene, cfg: &PipelineConfig, heads: &Heads, provider: &dyn FeatureProvider) -> Vec<PseudoLabel> {
    let preps = prepare_scene(scene, cfg, &heads.psm, provider);
    let prm = if cfg.toggles.prm { heads.prm.as_ref() } else { None };
    label_prepared(scene, &preps, cfg, prm)
}

/// Everything a corpus run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub labels: Vec<Vec<PseudoLabel>>,
    /// Present when every scene carries ground truth.
    pub report: Option<EvalReport>,
    pub psm_curve: Vec<f64>,
    pub prm_curve: Vec<f64>,
    /// Corpus mean of the final losses, selection loss weighted by `lambda`.
    pub losses: LossBreakdown,
    pub heads: Option<Heads>,
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))
}

/// Trains both heads on `scenes`, labels every scene and evaluates when possible.
///
/// `jobs` bounds the labeling threads (0 picks the core count); output does not depend on it.
pub fn run_corpus(scenes: &[Scene], names: &[String], cfg: &PipelineConfig, jobs: usize) -> Result<RunOutput> {
    run_corpus_with(scenes, names, cfg, jobs, &SceneFeatures)
}

pub fn run_corpus_with(
    scenes: &[Scene],
    names: &[String],
    cfg: &PipelineConfig,
    jobs: usize,
    provider: &dyn FeatureProvider,
) -> Result<RunOutput> {
    cfg.validate()?;
    let config = serde_json::to_value(cfg).expect("config serialization is infallible");
    if scenes.is_empty() {
        return Ok(RunOutput {
            labels: Vec::new(),
            report: Some(evaluate(names, scenes, &[], config)?),
            psm_curve: Vec::new(),
            prm_curve: Vec::new(),
            losses: LossBreakdown::default(),
            heads: None,
        });
    }
    let pool = thread_pool(jobs)?;
    let psm = train_psm(scenes, cfg)?;
    let preps: Vec<Vec<Prepared>> =
        pool.install(|| scenes.par_iter().map(|s| prepare_scene(s, cfg, &psm.params, provider)).collect());
    let batches: Vec<(PsmBatch, PrmBatch)> = pool.install(|| {
        scenes
            .par_iter()
            .zip(&preps)
            .enumerate()
            .map(|(i, (s, p))| training_batches(s, p, &scene_negatives(s, i, cfg, p), provider))
            .collect()
    });
    let prm = if cfg.toggles.prm {
        let prm_batches: Vec<PrmBatch> = batches
            .iter()
            .filter(|(_, b)| !b.objects.is_empty())
            .map(|(_, b)| b.clone())
            .collect();
        Some(train_prm(&prm_batches, &psm.params, cfg)?)
    } else {
        None
    };
    let prm_head = prm.as_ref().map(|o| &o.params);
    let labels: Vec<Vec<PseudoLabel>> = pool.install(|| {
        scenes
            .par_iter()
            .zip(&preps)
            .map(|(s, p)| label_prepared(s, p, cfg, prm_head))
            .collect()
    });
    let losses = corpus_losses(&psm.params, prm_head, &batches, cfg)?;
    let report = if scenes.iter().all(|s| s.ground_truth.is_some()) {
        Some(evaluate(names, scenes, &labels, config)?)
    } else {
        None
    };
    Ok(RunOutput {
        labels,
        report,
        psm_curve: psm.curve,
        prm_curve: prm.as_ref().map(|o| o.curve.clone()).unwrap_or_default(),
        losses,
        heads: Some(Heads {
            psm: psm.params,
            prm: prm.map(|o| o.params),
        }),
    })
}

fn corpus_losses(psm: &MilHeadParams, prm: Option<&MilHeadParams>, batches: &[(PsmBatch, PrmBatch)], cfg: &PipelineConfig) -> Result<LossBreakdown> {
    let used: Vec<&(PsmBatch, PrmBatch)> = batches.iter().filter(|(p, _)| !p.objects.is_empty()).collect();
    let mut sum = LossBreakdown::default();
    for (pb, rb) in &used {
        let b = match prm {
            Some(head) => combined_loss(psm, head, pb, rb, cfg.lambda, cfg.alpha, cfg.focal_gamma)?.0,
            None => {
                let l_psm = crate::mil_head::psm_loss_and_grads(psm, pb)?.0;
                LossBreakdown {
                    l_psm,
                    total: cfg.lambda * l_psm,
                    ..Default::default()
                }
            }
        };
        sum.l_psm += b.l_psm;
        sum.l_pos += b.l_pos;
        sum.l_neg += b.l_neg;
        sum.l_prm += b.l_prm;
        sum.total += b.total;
    }
    let n = used.len().max(1) as f64;
    Ok(LossBreakdown {
        l_psm: sum.l_psm / n,
        l_pos: sum.l_pos / n,
        l_neg: sum.l_neg / n,
        l_prm: sum.l_prm / n,
        total: sum.total / n,
    })
}

/// The single-stage baseline: selection only, no distance guidance.
pub fn run_single_mil_baseline(scenes: &[Scene], names: &[String], cfg: &PipelineConfig, jobs: usize) -> Result<RunOutput> {
    run_corpus(scenes, names, &cfg.baseline(), jobs)
}

/// `epoch,loss_psm,loss_prm` rows, epochs counted from 1; a missing stage leaves its column empty.
pub fn loss_curve_csv(psm: &[f64], prm: &[f64]) -> String {
    let mut s = String::from("epoch,loss_psm,loss_prm\n");
    let cell = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in 0..psm.len().max(prm.len()) {
        let _ = writeln!(s, "{},{},{}", e + 1, cell(psm.get(e)), cell(prm.get(e)));
    }
    s
}

/// File names written by [`write_outputs`].
pub mod output_files {
    pub const LABELS_DIR: &str = "labels";
    pub const REPORT: &str = "report.json";
    pub const REPORT_CSV: &str = "report.csv";
    pub const LOSS_CURVE: &str = "loss_curve.csv";
    pub const LOSSES: &str = "losses.json";
}

/// Writes labels (one file per scene, named like the scene), report, CSVs and losses.
pub fn write_outputs(dir: impl AsRef<Path>, names: &[String], out: &RunOutput) -> Result<()> {
    let dir = dir.as_ref();
    let labels_dir = dir.join(output_files::LABELS_DIR);
    std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    for (name, labels) in names.iter().zip(&out.labels) {
        let file = Path::new(name).file_name().map_or_else(|| name.clone().into(), |f| f.to_os_string());
        save_pseudo_labels(labels, labels_dir.join(file))?;
    }
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    if let Some(r) = &out.report {
        write(output_files::REPORT, r.to_json())?;
        write(output_files::REPORT_CSV, r.per_scene_csv())?;
    }
    write(output_files::LOSS_CURVE, loss_curve_csv(&out.psm_curve, &out.prm_curve))?;
    write(
        output_files::LOSSES,
        serde_json::to_string_pretty(&out.losses).expect("loss serialization is infallible"),
    )?;
    Ok(())
}
