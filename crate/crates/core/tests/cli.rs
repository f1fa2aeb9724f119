mod common;

use std::path::Path;
use std::process::{Command, Output};

use guided_depth::io::{read_trajectory, write_pfm, PriorKind, RunConfig};
use guided_depth::scene::DepthMap;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guided-depth")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a synthetic scene and an analytic-prior config pointing at its ground truth.
fn analytic_setup(root: &Path, seed: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let scene = root.join("scene");
    ok(&["synth", "--out", s(&scene), "--seed", seed]);
    let mut cfg = common::suite_config();
    cfg.prior.kind = PriorKind::Analytic;
    cfg.prior.mean_depth = Some(scene.join("gt_depth.pfm"));
    cfg.guidance.ensemble_size = 3;
    let path = root.join("analytic.toml");
    cfg.save(&path).unwrap();
    (scene, path)
}

fn metric(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .parse()
        .unwrap()
}

#[test]
fn synth_estimate_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, cfg) = analytic_setup(dir.path(), "11");
    let est = dir.path().join("est");
    ok(&["estimate", "--config", s(&cfg), "--scene", s(&scene), "--out", s(&est)]);
    let ev = dir.path().join("eval");
    ok(&["eval", "--pred", s(&est.join("depth.pfm")), "--gt", s(&scene.join("gt_depth.pfm")), "--out", s(&ev)]);
    let text = std::fs::read_to_string(ev.join("metrics.txt")).unwrap();
    let raw = metric(&text, "raw.abs_rel");
    assert!(raw < 0.1, "raw AbsRel {raw}");
    assert!(metric(&text, "aligned.abs_rel").is_finite());
    let jsonl = std::fs::read_to_string(ev.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["aligned"], false);
    assert_eq!(lines[1]["aligned"], true);
    let run = RunConfig::load(&est.join("run.toml")).unwrap();
    assert_eq!(run.paths.scene.as_deref(), Some(scene.as_path()));
}

#[test]
fn estimate_is_byte_for_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, cfg) = analytic_setup(dir.path(), "12");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["estimate", "--config", s(&cfg), "--scene", s(&scene), "--out", s(out), "--steps", "40"]);
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 6);
    for name in names {
        let (x, y) = (std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
        if name == "run.toml" {
            continue;
        }
        assert_eq!(x, y, "{name:?} differs");
    }
    let synth_again = dir.path().join("scene2");
    ok(&["synth", "--out", s(&synth_again), "--seed", "12"]);
    for f in ["left.png", "right.png", "gt_depth.pfm", "rig.txt"] {
        assert_eq!(std::fs::read(scene.join(f)).unwrap(), std::fs::read(synth_again.join(f)).unwrap());
    }
}

#[test]
fn mismatched_eval_inputs_exit_with_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.pfm"), dir.path().join("b.pfm"));
    write_pfm(&a, &DepthMap::constant(4, 3, 2.0).unwrap()).unwrap();
    write_pfm(&b, &DepthMap::constant(3, 4, 2.0).unwrap()).unwrap();
    let out = cli(&["eval", "--pred", s(&a), "--gt", s(&b), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(10));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[DimensionMismatch]:"), "{err}");
}

#[test]
fn missing_inputs_are_reported_by_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["estimate", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(22));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[MissingField]:"));

    let bad = dir.path().join("bad.pfm");
    std::fs::write(&bad, b"PF\n2 2\n-1.0\n").unwrap();
    let out = cli(&["eval", "--pred", s(&bad), "--gt", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(20));
    assert!(String::from_utf8_lossy(&out.stderr).contains("PFM"));

    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[guidance]\nlamda = 3.0\n").unwrap();
    let out = cli(&["estimate", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(31));
}

#[test]
fn default_config_parses_back() {
    let out = ok(&["default-config"]);
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn synth_suite_writes_numbered_scenes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--suite", "3", "--out", s(dir.path())]);
    for k in 0..3 {
        let d = dir.path().join(format!("scene_{k:02}"));
        for f in ["left.png", "right.png", "gt_depth.pfm", "rig.txt", "right_filled.png", "left_occluded.png"] {
            assert!(d.join(f).exists(), "{}", d.join(f).display());
        }
    }
}

#[test]
fn train_then_estimate_with_toy_prior_in_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = RunConfig::default();
    cfg.train.corpus_size = 24;
    cfg.train.corpus.width = 16;
    cfg.train.corpus.height = 16;
    cfg.train.architecture.hidden_channels = 6;
    cfg.train.optimizer.steps = 20;
    cfg.train.optimizer.batch_size = 4;
    cfg.train.optimizer.validation_size = 4;
    cfg.synth.width = 16;
    cfg.synth.height = 16;
    cfg.guidance.ensemble_size = 2;
    cfg.guidance.steps = 8;
    cfg.reprojection.iterations = 5;
    cfg.prior.checkpoint = Some(root.join("prior/prior.ckpt"));
    let path = root.join("toy.toml");
    cfg.save(&path).unwrap();

    ok(&["train-prior", "--config", s(&path), "--out", s(&root.join("prior"))]);
    let log = std::fs::read_to_string(root.join("prior/train_log.txt")).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 20);

    ok(&["synth", "--config", s(&path), "--out", s(&root.join("scene")), "--seed", "4"]);
    for (mode, records) in [("full", 8), ("scale-shift-only", 8), ("reprojection-only", 5)] {
        let out = root.join(mode);
        ok(&[
            "estimate", "--config", s(&path), "--scene", s(&root.join("scene")), "--out", s(&out), "--mode", mode,
        ]);
        for k in 0..2 {
            let rows = read_trajectory(&out.join(format!("trajectory_{k:02}.txt"))).unwrap();
            assert_eq!(rows.len(), records, "{mode}");
        }
        assert!(!out.join("trajectory_02.txt").exists());
    }
}

#[test]
fn global_scale_flag_skips_the_search() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, cfg) = analytic_setup(dir.path(), "13");
    let out = dir.path().join("est");
    ok(&["estimate", "--config", s(&cfg), "--scene", s(&scene), "--out", s(&out), "--global-scale", "7.5", "--ensemble", "1"]);
    let summary = std::fs::read_to_string(out.join("estimate.txt")).unwrap();
    assert!(summary.contains("global_scale = 7.5"), "{summary}");
}
