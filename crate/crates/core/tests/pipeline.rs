// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;

use aulab::harness::{self, run_all, ExperimentConfig, Run, BASE_TAG};
use aulab::probe::Position;
use aulab::taskgen::Split;

fn smoke_run(dir: &std::path::Path) -> Run {
    Run::new(ExperimentConfig::smoke(), dir).unwrap()
}

#[test]
fn two_runs_match_and_resume_recomputes_only_what_is_missing() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = smoke_run(a.path());
    let ma = run_all(&ra).unwrap();
    let mb = run_all(&smoke_run(b.path())).unwrap();
    assert!(ma.same_outputs(&mb));
    assert!(ma.artifacts.iter().any(|e| e.path == "table.csv"));
    assert!(ma.artifacts.iter().any(|e| e.path == "models/base/weights.bin"));

    let report = ra.layout.report(BASE_TAG, Split::HardTest, Position::Pre);
    let before = fs::read(&report).unwrap();
    fs::remove_file(&report).unwrap();
    let again = run_all(&ra).unwrap();
    assert_eq!(fs::read(&report).unwrap(), before);
    assert!(again.same_outputs(&ma));
    for (stage, secs) in &again.timing {
        if stage == "eval" {
            assert!(*secs > 0.0);
        } else {
            assert_eq!(*secs, 0.0, "{stage} should have been skipped");
        }
    }
}

#[test]
fn stages_name_their_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let run = smoke_run(dir.path());
    let err = harness::cmd_train(&run).unwrap_err();
    assert!(err.is_dependency());
    assert!(err.to_string().contains("`gen`"), "{err}");

    harness::cmd_gen(&run).unwrap();
    let err = harness::cmd_extract(&run, BASE_TAG, Split::EasyCal, None).unwrap_err();
    assert!(err.to_string().contains("`train`"), "{err}");
    let err = harness::cmd_probe(&run, BASE_TAG, Position::Pre).unwrap_err();
    assert!(err.to_string().contains("`extract`"), "{err}");
    let err = harness::cmd_table(&run).unwrap_err();
    assert!(err.to_string().contains("`select`"), "{err}");
    assert!(!harness::cmd_forge(&run, "no-such-method").unwrap_err().is_dependency());
}

#[test]
fn base_only_config_tabulates_only_base() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::smoke();
    config.methods.dropout_rates.clear();
    config.methods.grad_ascent = None;
    config.methods.npo = None;
    config.methods.rmu = None;
    let run = Run::new(config, dir.path()).unwrap();
    run_all(&run).unwrap();
    let table = fs::read_to_string(run.layout.table()).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 2);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("base")));
}

#[test]
fn refuses_a_directory_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = smoke_run(dir.path());
    harness::cmd_gen(&run).unwrap();
    let mut other = ExperimentConfig::smoke();
    other.reseed(9);
    let err = run_all(&Run::new(other, dir.path()).unwrap()).unwrap_err();
    assert!(!err.is_dependency());
    assert!(err.to_string().contains("different config"));
}
