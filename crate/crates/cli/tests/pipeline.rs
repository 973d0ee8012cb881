//! Drives the installed binary over real files: the full synth, train,
//! infer, link, eval chain, plus the failure paths callers will hit first.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_actdet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

const SYNTH_CFG: &str = "\
frame_size = 32
video_len = 16
num_classes = 2
actor_size = 8,12
transition_len = 2,3
active_len = 8,10
distractors = 1
noise_amp = 0.02
seed = 5
";

const TRAIN_CFG: &str = "\
lr = 0.002
epochs = 1
warmup_steps = 2
batch_clips = 2
seed = 3
clip_len = 8
stem_channels = 3
trunk_channels = 6
hidden_channels = 4
dropout = 0.0
scales = 8,16
aspect_ratios = 1.0
";

#[test]
fn pipeline_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |name: &str| p(name).display().to_string();
    write(&p("synth.cfg"), SYNTH_CFG);
    write(&p("train.cfg"), TRAIN_CFG);

    run_ok(&["synth", "--config", &s("synth.cfg"), "--episodes", "4", "--out", &s("data")]);
    assert!(p("data/manifest.json").exists());
    assert!(p("data/gt.jsonl").exists());

    for ckpt in ["a.ckpt", "b.ckpt"] {
        run_ok(&[
            "train",
            "--data",
            &s("data"),
            "--config",
            &s("train.cfg"),
            "--mode",
            "tac",
            "--out",
            &s(ckpt),
        ]);
    }
    assert_eq!(
        std::fs::read(p("a.ckpt")).unwrap(),
        std::fs::read(p("b.ckpt")).unwrap(),
        "same seed must give a bitwise identical checkpoint"
    );

    for (dets, tubes, metrics) in
        [("d1.jsonl", "t1.jsonl", "m1.json"), ("d2.jsonl", "t2.jsonl", "m2.json")]
    {
        run_ok(&[
            "infer",
            "--checkpoint",
            &s("a.ckpt"),
            "--data",
            &s("data"),
            "--out",
            &s(dets),
        ]);
        run_ok(&["link", "--dets", &s(dets), "--refine", "--out", &s(tubes)]);
        run_ok(&[
            "eval",
            "--tubes",
            &s(tubes),
            "--dets",
            &s(dets),
            "--gt",
            &s("data/gt.jsonl"),
            "--out",
            &s(metrics),
        ]);
    }
    let m1 = std::fs::read(p("m1.json")).unwrap();
    assert_eq!(m1, std::fs::read(p("m2.json")).unwrap(), "metrics must be byte identical");

    let v: serde_json::Value = serde_json::from_slice(&m1).unwrap();
    for key in ["frame_map", "video_map", "temporal_map", "per_class"] {
        assert!(v.get(key).is_some(), "metrics JSON lacks {key}");
    }
    for t in ["0.2", "0.5", "0.75", "0.5:0.95"] {
        assert!(v["video_map"].get(t).is_some(), "video_map lacks {t:?}");
    }
}

#[test]
fn invalid_synth_config_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    write(&cfg, "num_classes = 0\n");
    let out = run(&[
        "synth",
        "--config",
        &cfg.display().to_string(),
        "--episodes",
        "1",
        "--out",
        &dir.path().join("data").display().to_string(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("num_classes"), "diagnostic should name the field, got: {err}");
}

#[test]
fn unknown_config_key_is_rejected_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.cfg");
    write(&cfg, "frame_size = 32\nfame_size = 64\n");
    let out = run(&[
        "synth",
        "--config",
        &cfg.display().to_string(),
        "--episodes",
        "1",
        "--out",
        &dir.path().join("data").display().to_string(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fame_size") && err.contains("typo.cfg:2"), "got: {err}");
}

#[test]
fn eval_requires_some_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.jsonl");
    write(&gt, "");
    let out = run(&["eval", "--gt", &gt.display().to_string()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--tubes and/or --dets"));
}

#[test]
fn gradcheck_gates_on_injected_fault() {
    let clean = run_ok(&["gradcheck", "--max-checks", "2"]);
    let text = String::from_utf8_lossy(&clean.stdout);
    assert!(text.contains("conv2d") && text.contains("max_rel_error"));

    let bad = run(&["gradcheck", "--max-checks", "2", "--inject-bug"]);
    assert!(!bad.status.success(), "injected fault must flip the exit status");
}

#[test]
fn fuse_averages_action_scores() {
    let dir = tempfile::tempdir().unwrap();
    let line = |p: f64| {
        format!(
            r#"{{"video":"v","frame":3,"class":1,"box":[0.1,0.1,0.4,0.4],"p":{p},"t":0.5}}"#
        ) + "\n"
    };
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let out = dir.path().join("fused.jsonl");
    write(&a, &line(0.2));
    write(&b, &line(0.6));
    run_ok(&[
        "fuse",
        "--a",
        &a.display().to_string(),
        "--b",
        &b.display().to_string(),
        "--out",
        &out.display().to_string(),
    ]);
    let fused = std::fs::read_to_string(&out).unwrap();
    let v: serde_json::Value = serde_json::from_str(fused.trim()).unwrap();
    assert_eq!(v["p"].as_f64().unwrap(), 0.4);
    assert_eq!(v["t"].as_f64().unwrap(), 0.5);
}
