use std::fs;
use std::process::{Command, Output};

fn hierfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierfuse"))
        .args(args)
        .output()
        .expect("spawn hierfuse")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(hierfuse(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hierfuse(&["synth", "--family", "nope"]).status.code(), Some(1));
    assert_eq!(hierfuse(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = hierfuse(&["train", "--set", "train.epochz=3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train.epochz"), "{}", stderr(&out));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"fusion": {"heads": 0}}"#).unwrap();
    let out = hierfuse(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.hmlt");
    let out = hierfuse(&["verify-frozen", "--before", missing.to_str().unwrap(), "--after", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_a_balanced_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = hierfuse(&[
        "synth",
        "--family",
        "blend_seam",
        "--per-class",
        "10",
        "--frames-per-video",
        "4",
        "--name",
        "tiny",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = fs::read_to_string(dir.path().join("tiny.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 20);
    assert_eq!(records.iter().filter(|r| r["label"] == 1).count(), 10);
    assert!(records.iter().all(|r| r["domain"] == "blend_seam"));
    for r in &records {
        assert!(dir.path().join(r["path"].as_str().unwrap()).exists());
    }
}
