use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_retrospect"))
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn gradcheck_passes() {
    let out = bin().args(["gradcheck", "--count", "20"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 20);
}

#[test]
fn gradcheck_fails_on_impossible_tolerance() {
    let out = bin().args(["gradcheck", "--count", "6", "--tol", "0"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn train_pair_and_sweep_on_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("blobs.toml");

    let out = bin()
        .args(["train", "--seed", "3", "--retro", "off", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("one"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("one/summary.json")).unwrap();
    assert!(summary.contains("\"seed\": 3"));
    assert!(summary.contains("\"enabled\": false"));

    let out = bin()
        .args(["pair", "--seeds", "1,2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("pair"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("pair/pair_summary.json").exists());

    let out = bin()
        .args(["sweep", "--axis", "kappa", "--values", "1,4", "--seeds", "1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("sweep"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap().lines().count(), 3);
}

#[test]
fn analyze_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("analyze").arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("mismatches 0"));
    assert!(dir.path().join("consistency.csv").exists());
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("blobs.toml")).unwrap() + "\nbogus = 1\n";
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    let out = bin().arg("train").arg("--config").arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("bogus"));
}
