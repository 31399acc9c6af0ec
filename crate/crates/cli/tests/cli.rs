use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pplab(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pplab"));
    cmd.args(args).env_remove("PPLAB_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL_CORPUS: &str = r#"{"num_scenes": 5, "min_objects": 2, "max_objects": 3}"#;
const FAST_RUN: &str = r#"{"preset": "paper_defaults", "train": {"epochs": 3}}"#;

fn synth(dir: &Path, out: &str, envs: &[(&str, &str)]) -> Output {
    let cfg = write(dir, "synth.json", SMALL_CORPUS);
    pplab(&["synth", "--config", &cfg, "--out", out], envs)
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn synth_writes_scenes_and_manifest_deterministically() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = synth(tmp.path(), d.to_str().unwrap(), &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files = dir_contents(&a);
    assert_eq!(files.len(), 6);
    assert!(files.iter().any(|(n, _)| n == "manifest.json"));
    assert_eq!(files, dir_contents(&b));
}

#[test]
fn seed_variable_overrides_config_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&synth(tmp.path(), a.to_str().unwrap(), &[])), 0);
    assert_eq!(code(&synth(tmp.path(), b.to_str().unwrap(), &[("PPLAB_SEED", "7")])), 0);
    assert_ne!(dir_contents(&a), dir_contents(&b));
    let bad = synth(tmp.path(), b.to_str().unwrap(), &[("PPLAB_SEED", "seven")]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn invalid_rate_is_a_config_error_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "bad.json", r#"{"part_rate": 1.5}"#);
    let o = pplab(&["synth", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("part_rate"));
}

#[test]
fn unknown_pipeline_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    assert_eq!(code(&synth(tmp.path(), corpus.to_str().unwrap(), &[])), 0);
    let cfg = write(tmp.path(), "run.json", r#"{"t_min3": 0.1}"#);
    let o = pplab(&["run", "--corpus", corpus.to_str().unwrap(), "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()], &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_corpus_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "run.json", FAST_RUN);
    let o = pplab(&["run", "--corpus", tmp.path().join("nope").to_str().unwrap(), "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()], &[]);
    assert_eq!(code(&o), 3);
}

#[test]
fn run_writes_labels_report_and_curves_independent_of_jobs() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    assert_eq!(code(&synth(tmp.path(), corpus.to_str().unwrap(), &[])), 0);
    let cfg = write(tmp.path(), "run.json", FAST_RUN);
    let mut outputs = Vec::new();
    for (tag, jobs) in [("one", "1"), ("four", "4")] {
        let out = tmp.path().join(tag);
        let o = pplab(&["run", "--jobs", jobs, "--corpus", corpus.to_str().unwrap(), "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("miou_box"));
        outputs.push(out);
    }
    let top = dir_contents(&outputs[0]);
    let names: Vec<&str> = top.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["loss_curve.csv", "losses.json", "report.csv", "report.json"]);
    let curve = String::from_utf8(top[0].1.clone()).unwrap();
    assert!(curve.starts_with("epoch,loss_psm,loss_prm\n"));
    assert_eq!(curve.lines().count(), 4);
    assert_eq!(dir_contents(&outputs[0].join("labels")).len(), 5);
    assert_eq!(top, dir_contents(&outputs[1]));
    assert_eq!(dir_contents(&outputs[0].join("labels")), dir_contents(&outputs[1].join("labels")));
}

#[test]
fn baseline_flag_routes_to_single_stage() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("corpus");
    assert_eq!(code(&synth(tmp.path(), corpus.to_str().unwrap(), &[])), 0);
    let cfg = write(tmp.path(), "run.json", FAST_RUN);
    let out = tmp.path().join("base");
    let o = pplab(&["run", "--baseline", "--corpus", corpus.to_str().unwrap(), "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0);
    let curve = fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    // no refinement stage, so its column stays empty
    assert!(curve.lines().skip(1).all(|l| l.ends_with(',')));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["toggles"]["prm"], false);
}

#[test]
fn gradcheck_passes_and_reports_all_losses() {
    let o = pplab(&["gradcheck", "--seed", "0"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["loss_psm", "loss_pos", "loss_neg", "loss_prm"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with("pass")), "{name}: {text}");
    }
}

#[test]
fn corrupted_gradient_fails_with_the_coordinate() {
    let o = pplab(&["gradcheck", "--seed", "0", "--instances", "2", "--corrupt-gradient"], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gradient mismatch"));
}

#[test]
fn help_lists_config_keys_and_exit_codes() {
    let o = pplab(&["--help"], &[]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["t_min1", "train.epochs", "toggles.bms", "part_rate", "PPLAB_SEED", "3 I/O error"] {
        assert!(text.contains(key), "{key} missing");
    }
}
