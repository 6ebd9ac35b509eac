// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::Command;

use aulab::harness::ExperimentConfig;

fn aulab(dir: &Path, args: &[&str]) -> (i32, String) {
    let config = dir.join("smoke.json");
    std::fs::write(&config, serde_json::to_vec(&ExperimentConfig::smoke()).unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_aulab"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

#[test]
fn missing_prerequisite_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = aulab(dir.path(), &["train"]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("run stage `gen` first"), "{text}");
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(aulab(dir.path(), &["frobnicate"]).0, 1);
    assert_eq!(aulab(dir.path(), &["probe", "--position", "middle"]).0, 1);
    assert_eq!(aulab(dir.path(), &["gen"]).0, 0);
    let (code, text) = aulab(dir.path(), &["forge", "--method", "nope@1"]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("unknown method"), "{text}");
}

#[test]
fn stages_run_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &["gen"][..],
        &["train"],
        &["extract"],
        &["probe", "--position", "pre"],
        &["eval", "--split", "hard_test", "--position", "pre"],
        &["select"],
        &["forge"],
        &["extract", "--method", "grad-ascent@0.02", "--split", "easy_cal"],
    ] {
        let (code, text) = aulab(d, args);
        assert_eq!(code, 0, "{args:?}: {text}");
    }
    assert!(d.join("out/reports/base/hard_test.pre.json").exists());
    assert!(d.join("out/records/grad-ascent@0.02/easy_cal.post.jsonl").exists());
    let (code, text) = aulab(d, &["table"]);
    assert_eq!(code, 2, "table before all reports exist: {text}");
    let (code, text) = aulab(d, &["run-all"]);
    assert_eq!(code, 0, "{text}");
    let (code, text) = aulab(d, &["table"]);
    assert_eq!(code, 0);
    assert!(text.starts_with("split,position,method,tag,n,accuracy,brier,ece,auroc"));
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = aulab(dir.path(), &["--help"]);
    assert_eq!(code, 0);
    assert!(text.contains("run-all"));
}
