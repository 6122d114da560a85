//! End-to-end checks of the command-line interface.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_layerwise"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "model = cli\nhierarchy = [1,1]\nchannels = 4,8\nlr = 3e-3\nepochs = 2\n\
         batch_size = 16\nseeds = 1\nmodes = layerwise_concurrent,global\n\
         dataset = synth_blobs\nclasses = 4\ntrain_count = 32\ntest_count = 16\n\
         resolution = 8\nout = {}\n",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("layerwise_concurrent"));
    assert!(dir.path().join("out/metrics.csv").exists());
    assert!(dir.path().join("out/summary.txt").exists());
    assert!(dir.path().join("out/provenance.log").exists());

    // Seed override changes the run ids in the CSV.
    let out2 = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seeds", "7", "--out"])
        .arg(dir.path().join("out2"))
        .output()
        .unwrap();
    assert!(out2.status.success());
    let csv = std::fs::read_to_string(dir.path().join("out2/metrics.csv")).unwrap();
    assert!(csv.contains("-s7,"));
}

#[test]
fn curves_emits_two_column_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert!(bin().args(["run", "--config"]).arg(&cfg).status().unwrap().success());
    let out = bin()
        .arg("curves")
        .arg(dir.path().join("out/metrics.csv"))
        .arg("--out")
        .arg(dir.path().join("curves"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let listed = String::from_utf8_lossy(&out.stdout);
    assert!(listed.lines().count() >= 2);
    let first = listed.lines().next().unwrap();
    let text = std::fs::read_to_string(first).unwrap();
    for line in text.lines() {
        assert_eq!(line.split(' ').count(), 2, "bad row '{line}'");
    }
}

#[test]
fn audit_passes_on_layerwise_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = bin().args(["audit", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn hierarchies_check_and_enumerate() {
    let out = bin()
        .args(["hierarchies", "--check", "[1,1,2,2]"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("accelerated=true"));

    let out = bin()
        .args(["hierarchies", "--convs", "6", "--stages", "4", "--accelerated"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "[1,1,2,2]  accelerated=true  score=1440");
}

#[test]
fn bad_config_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "hierarchy = [1,1]\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
}
