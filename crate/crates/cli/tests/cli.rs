use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_translucid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn count_png(dir: &Path) -> usize {
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            n += count_png(&p);
        } else if p.extension().is_some_and(|x| x == "png") {
            n += 1;
        }
    }
    n
}

#[test]
fn verify_process_reports_pass() {
    let out = run(&["verify-process", "--seed", "3", "--cases", "30"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS telescoping"), "{text}");
    assert!(text.contains("limit 1e-5"), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["sweep", "--param", "nope"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--desk", "--data-root", s(dir.path()), "--out-dir", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepohcs = 3\n").unwrap();
    let out = run(&["synth-preview", "--config", s(&bad), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epohcs"));
}

#[test]
fn synth_preview_writes_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth-preview", "--desk", "--count", "4", "--out-dir", s(dir.path()), "--data-root", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(count_png(dir.path()), 12);
    for i in 0..4 {
        for kind in ["image", "mask", "prev"] {
            assert!(dir.path().join(format!("{i:03}_{kind}.png")).is_file());
        }
    }
}

#[test]
fn toy_train_infer_eval_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let pred = dir.path().join("pred");
    let ok = |args: &[&str]| {
        let out = run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["make-toy", "--root", s(&root), "--train", "4", "--test-normal", "2", "--test-anomalous", "2", "--size", "16"]);

    let cfg = dir.path().join("cfg.toml");
    let text = "[data]\nresize = 16\ncrop = 16\ncategory = \"toy\"\n\
                [train]\nepochs = 2\nlr_drop_epoch = 1\nbatch_size = 2\nsteps = 4\nimage_size = 16\n\
                [train.model]\nbase_width = 8\nlevels = 2\nblocks_per_level = 1\ntime_dim = 8\ngroups = 4\nmax_mult = 2\n\
                [train.synthesis]\nprocedural_textures = 4\n\
                [inference]\nkernel = 1\n";
    std::fs::write(&cfg, text).unwrap();
    let c = s(&cfg);
    ok(&["train", "--config", c, "--data-root", s(&root), "--out-dir", s(&run_dir)]);
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ckpt = run_dir.join("final.ckpt");

    ok(&["infer", "--config", c, "--checkpoint", s(&ckpt), "--input-dir", s(&root.join("toy/test")), "--out-dir", s(&pred), "--save-trace"]);
    let scores = std::fs::read_to_string(pred.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 5);
    assert!(pred.join("good/000.png").is_file());
    assert!(pred.join("trace/good/000/x_004.png").is_file());
    assert!(pred.join("trace/good/000/x_000.png").is_file());

    let report = dir.path().join("report.csv");
    let stdout = ok(&["eval", "--config", c, "--pred-dir", s(&pred), "--gt-dir", s(&root.join("toy/ground_truth")), "--out", s(&report)]);
    assert!(stdout.contains("(4 images)"), "{stdout}");
    let report = std::fs::read_to_string(report).unwrap();
    assert!(report.starts_with("metric,value\nauroc,"));

    let sweep = dir.path().join("sweep.csv");
    ok(&["sweep", "--config", c, "--data-root", s(&root), "--checkpoint", s(&ckpt), "--param", "steps", "--values", "2,4", "--out", s(&sweep)]);
    let rows = std::fs::read_to_string(sweep).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.contains("steps,2,"));

    ok(&["train", "--config", c, "--epochs", "3", "--data-root", s(&root), "--out-dir", s(&run_dir), "--resume", s(&ckpt)]);
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
}
