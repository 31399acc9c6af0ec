use std::fs;

use pplab::data_model::{load_pseudo_labels, PipelineConfig, Scene, Toggles};
use pplab::pipeline::{output_files, run_corpus, run_single_mil_baseline, write_outputs};
use pplab::geometry::box_iou;
use pplab::prm::box_mining;
use pplab::synth_eval::{generate_corpus, miou_box, scene_file_name, SyntheticConfig};
use tempfile::TempDir;

fn small_corpus(num_scenes: usize) -> (Vec<Scene>, Vec<String>) {
    let cfg = SyntheticConfig {
        num_scenes,
        ..SyntheticConfig::default()
    };
    let scenes = generate_corpus(&cfg).unwrap();
    let names = (0..num_scenes).map(scene_file_name).collect();
    (scenes, names)
}

fn quick(epochs: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = epochs;
    cfg
}

#[test]
fn lone_proposal_is_every_box() {
    let (mut scenes, names) = small_corpus(1);
    let s = &mut scenes[0];
    s.annotations.truncate(1);
    s.bags.truncate(1);
    s.bags[0].proposals.truncate(1);
    s.ground_truth.as_mut().unwrap().truncate(1);
    let only = s.bags[0].proposals[0].bbox;
    // generated positives would be alternatives
    let mut cfg = quick(3);
    cfg.toggles.pnpg = false;
    let out = run_corpus(&scenes, &names[..1], &cfg, 1).unwrap();
    let l = &out.labels[0][0];
    assert_eq!((l.psm_box, l.select_box, l.box_prm), (only, only, only));
}

#[test]
fn all_toggles_off_is_the_baseline() {
    let (scenes, names) = small_corpus(6);
    let mut off = quick(4);
    off.toggles = Toggles::all(false);
    let a = run_corpus(&scenes, &names, &off, 0).unwrap();
    let b = run_single_mil_baseline(&scenes, &names, &quick(4), 0).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.report, b.report);
    assert!(a.prm_curve.is_empty());
}

#[test]
fn one_label_per_annotation_in_corpus_order() {
    let (scenes, names) = small_corpus(8);
    let out = run_corpus(&scenes, &names, &quick(3), 0).unwrap();
    assert_eq!(out.labels.len(), scenes.len());
    for (s, ls) in scenes.iter().zip(&out.labels) {
        assert_eq!(ls.len(), s.annotations.len());
        for (l, a) in ls.iter().zip(&s.annotations) {
            assert_eq!((l.instance_id, l.class_id), (a.instance_id, a.class_id));
        }
    }
}

#[test]
fn mined_boxes_replay_from_provenance() {
    let (scenes, names) = small_corpus(8);
    let cfg = quick(5);
    let out = run_corpus(&scenes, &names, &cfg, 0).unwrap();
    for l in out.labels.iter().flatten() {
        let sc = &l.scores;
        assert_eq!(sc.bag_plus.len(), sc.prm_scores.len());
        let replay = box_mining(&sc.bag_plus, &sc.prm_scores, &l.select_box, cfg.k, cfg.t_min1, cfg.t_min2);
        assert_eq!(replay, l.box_prm);
    }
}

#[test]
fn without_generation_the_bag_is_unchanged() {
    let (scenes, names) = small_corpus(5);
    let mut cfg = quick(3);
    cfg.toggles.pnpg = false;
    let out = run_corpus(&scenes, &names, &cfg, 0).unwrap();
    for (s, ls) in scenes.iter().zip(&out.labels) {
        for (l, bag) in ls.iter().zip(&s.bags) {
            assert_eq!(l.scores.bag_plus, bag.boxes());
        }
    }
}

#[test]
fn outputs_are_byte_identical_and_independent_of_threads() {
    let (scenes, names) = small_corpus(6);
    let cfg = quick(4);
    let dirs: Vec<TempDir> = (0..2).map(|_| TempDir::new().unwrap()).collect();
    for (d, jobs) in dirs.iter().zip([1, 3]) {
        let out = run_corpus(&scenes, &names, &cfg, jobs).unwrap();
        write_outputs(d.path(), &names, &out).unwrap();
    }
    let read = |d: &TempDir, rel: &str| fs::read(d.path().join(rel)).unwrap();
    for f in [output_files::REPORT, output_files::REPORT_CSV, output_files::LOSS_CURVE, output_files::LOSSES] {
        assert_eq!(read(&dirs[0], f), read(&dirs[1], f), "{f}");
    }
    for n in &names {
        let rel = format!("{}/{n}", output_files::LABELS_DIR);
        assert_eq!(read(&dirs[0], &rel), read(&dirs[1], &rel));
    }
}

#[test]
fn report_matches_recomputation_from_saved_labels() {
    let (scenes, names) = small_corpus(6);
    let out = run_corpus(&scenes, &names, &quick(4), 0).unwrap();
    let dir = TempDir::new().unwrap();
    write_outputs(dir.path(), &names, &out).unwrap();
    let report = out.report.unwrap();
    let (mut sum, mut count) = (0.0, 0);
    for (i, (s, n)) in scenes.iter().zip(&names).enumerate() {
        let labels = load_pseudo_labels(dir.path().join(output_files::LABELS_DIR).join(n)).unwrap();
        let gt = s.ground_truth.as_ref().unwrap();
        assert_eq!(miou_box(&labels, gt).unwrap(), report.per_scene[i].miou_box);
        for l in &labels {
            sum += box_iou(&l.box_prm, &s.gt_for(l.instance_id).unwrap().bbox);
            count += 1;
        }
    }
    assert_eq!(sum / count as f64, report.miou_box);
    let saved: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(output_files::REPORT)).unwrap()).unwrap();
    assert_eq!(saved["miou_box"].as_f64().unwrap(), report.miou_box);
    assert_eq!(saved["gap"].as_f64().unwrap(), report.gap);
}

#[test]
fn empty_corpus_gives_empty_report() {
    let out = run_corpus(&[], &[], &quick(3), 0).unwrap();
    assert!(out.labels.is_empty());
    let r = out.report.unwrap();
    assert_eq!((r.scenes, r.objects), (0, 0));
}
