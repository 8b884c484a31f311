use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn dualvol(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dualvol"));
    cmd.args(args).env("RUST_LOG", "warn");
    if let Some(n) = threads {
        cmd.env("RAYON_NUM_THREADS", n.to_string());
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dualvol(args, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn selftest_passes_and_writes_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("selftest.txt");
    let out = ok(&["selftest", "--report", path(&report)]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().count() >= 10);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")), "{stdout}");
    assert_eq!(std::fs::read_to_string(&report).unwrap(), stdout);
}

#[test]
fn usage_errors_exit_with_status_two() {
    assert_eq!(dualvol(&["no-such-command"], None).status.code(), Some(2));
    assert_eq!(dualvol(&["synth"], None).status.code(), Some(2));
    assert_eq!(dualvol(&["--help"], None).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    let out = dualvol(&["forward", "--sample", path(&missing), "--dump", path(dir.path())], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", path(&data), "--count", "2", "--seed", "4"]);
    let report = dir.path().join("report");
    let out = ok(&["eval", "--pred", path(&data), "--gt", path(&data), "--report", path(&report)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["iou"], 1.0);
    assert_eq!(v["miou"], 1.0);
    let csv = std::fs::read_to_string(report.with_extension("csv")).unwrap();
    assert!(csv.starts_with("class,iou\n"));
    assert!(report.with_extension("json").exists());
}

#[test]
fn train_then_forward_produces_every_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let weights = dir.path().join("weights");
    let dump = dir.path().join("dump");
    ok(&["synth", "--out", path(&data), "--count", "2"]);
    ok(&["train", "--data", path(&data), "--steps", "3", "--out", path(&weights)]);
    let log = std::fs::read_to_string(weights.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,loss,"));
    let sample = std::fs::read_dir(&data).unwrap().next().unwrap().unwrap().path();
    ok(&["forward", "--weights", path(&weights), "--sample", path(&sample), "--dump", path(&dump)]);
    for f in [
        "stereo.vol",
        "bev.vol",
        "confidence.vol",
        "ensemble.vol",
        "logits.vol",
        "depth.pgm",
        "confidence.pgm",
        "grid.label",
    ] {
        assert!(dump.join(f).exists(), "missing {f}");
    }
}

#[test]
fn forward_dumps_are_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", path(&data), "--seed", "9"]);
    let sample = std::fs::read_dir(&data).unwrap().next().unwrap().unwrap().path();
    let mut dumps = Vec::new();
    for (i, threads) in [None, None, Some(1), Some(4)].into_iter().enumerate() {
        let dump = dir.path().join(format!("dump{i}"));
        let out = dualvol(&["forward", "--sample", path(&sample), "--dump", path(&dump)], threads);
        assert!(out.status.success());
        dumps.push(read_dir_bytes(&dump));
    }
    assert!(dumps[0].len() >= 8);
    for d in &dumps[1..] {
        assert_eq!(d, &dumps[0]);
    }
}

#[test]
fn selftest_output_is_identical_across_thread_counts() {
    let a = dualvol(&["selftest"], Some(1));
    let b = dualvol(&["selftest"], Some(4));
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn config_overrides_reach_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let dump = dir.path().join("dump");
    ok(&["synth", "--out", path(&data)]);
    let sample = std::fs::read_dir(&data).unwrap().next().unwrap().unwrap().path();
    ok(&["forward", "--sample", path(&sample), "--dump", path(&dump), "--set", "mie.enabled=false"]);
    assert!(!dump.join("confidence.vol").exists());
    assert!(dump.join("ensemble.vol").exists());
    let out = dualvol(&["forward", "--sample", path(&sample), "--dump", path(&dump), "--set", "nonsense"], None);
    assert_eq!(out.status.code(), Some(1));
}
