//! End-to-end runs of the `emip` binary on a tiny dataset.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 6] = ["--set", "height=32", "--set", "width=32", "--set", "model.backbone_depths=[1,1,1,1]"];

fn emip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emip")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = emip(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "emip {args:?} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&SMALL);
    v
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, flow, stills, video, lt) = (d.join("data"), d.join("flow.ckpt"), d.join("static.ckpt"), d.join("video.ckpt"), d.join("lt.ckpt"));

    let out = ok(&["datagen", "--out", p(&data), "--clips", "10", "--frames", "3", "--size", "32x32", "--seed", "1"]);
    assert!(out.contains("10 clips"), "{out}");
    assert!(data.join("manifest.json").exists());
    assert!(data.join("clip0000/flow/00001.cfl").exists());

    ok(&with_small(&["pretrain-flow", "--data", p(&data), "--out", p(&flow), "--steps", "2"]));
    ok(&with_small(&["pretrain-static", "--data", p(&data), "--out", p(&stills), "--steps", "2"]));

    let csv = d.join("video.csv");
    let out = ok(&with_small(&[
        "train", "--data", p(&data), "--flow", p(&flow), "--static", p(&stills), "--out", p(&video), "--steps", "3", "--loss-csv", p(&csv),
    ]));
    assert!(out.contains("flownet hash unchanged"), "{out}");
    assert!(!out.lines().find(|l| l.contains("optimized groups")).unwrap().contains("flownet"), "{out}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("step,"), "{text}");

    let out = ok(&with_small(&["train-longterm", "--data", p(&data), "--ckpt", p(&video), "--out", p(&lt), "--steps", "2"]));
    assert!(out.contains("parameters trained"), "{out}");

    let report = d.join("eval.json");
    let preds = d.join("pred");
    let overlays = d.join("overlays");
    let flows = d.join("flows");
    let out = ok(&[
        "eval", "--data", p(&data), "--ckpt", p(&video), "--report", p(&report), "--save-pred", p(&preds),
        "--dump-overlays", p(&overlays), "--dump-flow", p(&flows),
    ]);
    assert!(out.contains("IoU") || out.contains("iou"), "{out}");
    assert!(out.contains("flow EPE inside mask"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["metrics"].is_object());
    assert!(std::fs::read_dir(&overlays).unwrap().next().is_some());
    assert!(std::fs::read_dir(&flows).unwrap().next().is_some());

    // scoring saved predictions reproduces the checkpoint evaluation
    let again = d.join("again.json");
    ok(&with_small(&["eval", "--gt", p(&data), "--pred", p(&preds), "--report", p(&again)]));
    let json2: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&again).unwrap()).unwrap();
    assert_eq!(json["metrics"]["mean"]["iou"], json2["metrics"]["mean"]["iou"]);

    ok(&["eval", "--data", p(&data), "--ckpt", p(&lt), "--longterm"]);

    let out = ok(&["count-params", "--ckpt", p(&lt)]);
    let last = out.lines().last().unwrap();
    let frac: f64 = last.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(frac > 0.0 && frac < 1.0, "{last}");
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let cases: Vec<Vec<&str>> = vec![
        vec!["eval", "--data", p(&missing), "--ckpt", p(&missing)],
        vec!["pretrain-flow", "--data", p(&missing), "--out", "x.ckpt"],
        vec!["datagen", "--out", p(&missing), "--size", "banana"],
        vec!["datagen", "--out", p(&missing), "--clips", "1", "--split-frac", "0.5,0.5,0.5"],
        vec!["count-params", "--stage", "sideways"],
        vec!["show-config", "--set", "no.such.key=1"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let out = emip(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "), "{args:?}: {err}");
    }
}

#[test]
fn show_config_round_trips_overrides() {
    let out = ok(&["show-config", "--set", "video.steps=17", "--set", "seed=9"]);
    assert!(out.contains("steps = 17"), "{out}");
    assert!(out.contains("seed = 9"), "{out}");
}
