use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn scribbletex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scribbletex")).args(args).output().unwrap()
}

fn demo(dir: &Path) -> String {
    let out = dir.join("scene");
    let o = scribbletex(&["demo", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.display().to_string()
}

fn edit(scene: &str, out: &str, extra: &[&str]) -> Output {
    let mesh = format!("{scene}/cube.obj");
    let atlas = format!("{scene}/atlas.png");
    let strokes = format!("{scene}/strokes.json");
    let config = format!("{scene}/config.toml");
    let mut args = vec!["edit", "--mesh", &mesh, "--atlas", &atlas, "--strokes", &strokes, "--config", &config, "--out", out];
    args.extend_from_slice(extra);
    scribbletex(&args)
}

#[test]
fn edit_writes_atlas_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let scene = demo(dir.path());
    let out = dir.path().join("out");
    let o = edit(&scene, out.to_str().unwrap(), &["--no-refine"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("atlas.png").exists());
    assert!(!out.join("session").exists());
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["area_refinement"], "disabled");
    assert_eq!(report["calls"]["seg"], 0);
    assert_eq!(report["seed"], 42);
}

#[test]
fn alternate_intent_rank_changes_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let scene = demo(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(edit(&scene, a.to_str().unwrap(), &[]).status.success());
    assert!(edit(&scene, b.to_str().unwrap(), &["--intent-rank", "2"]).status.success());
    let ra: Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    let rb: Value = serde_json::from_slice(&std::fs::read(b.join("report.json")).unwrap()).unwrap();
    assert_eq!(rb["regions"][0]["intent_rank"], 2);
    assert_ne!(ra["regions"][0]["semantic"], rb["regions"][0]["semantic"]);
}

#[test]
fn failures_use_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scene = demo(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let missing = scribbletex(&["edit", "--mesh", "/nonexistent.obj", "--atlas", "/nonexistent.png", "--strokes", &format!("{scene}/strokes.json"), "--out", out_s]);
    assert_eq!(missing.status.code(), Some(1));

    std::fs::write(dir.path().join("bad.toml"), "guidance_scale = -1.0\n").unwrap();
    let bad = edit(&scene, out_s, &["--config", dir.path().join("bad.toml").to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad.stderr));

    let stopped = edit(&scene, out_s, &["--dump-stages", "--stop-after", "intent"]);
    assert_eq!(stopped.status.code(), Some(4));
    let err: Value = serde_json::from_slice(&std::fs::read(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["stage"], "intent");

    // The persisted session was created with seed 42; another seed cannot resume it.
    let clash = edit(&scene, out_s, &["--dump-stages", "--seed", "7"]);
    assert_eq!(clash.status.code(), Some(2));
}

#[test]
fn eval_intent_prints_sweep() {
    let o = scribbletex(&["eval-intent"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let acc: Vec<f64> = text.lines().map(|l| l.split("accuracy=").nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(acc.len(), 4);
    assert!(acc.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(acc[3], 1.0);

    let d = scribbletex(&["eval-intent", "--distractors", "--max-n", "4"]);
    assert!(d.status.success());
    assert!(String::from_utf8(d.stdout).unwrap().lines().all(|l| l.ends_with("accuracy=0.000")));
}
