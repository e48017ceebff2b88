use std::path::Path;
use std::process::{Command, Output};

fn e4ssl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_e4ssl")).args(args).env_remove("E4SSL_CONFIG").output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_fails(out: &Output, code: i32, needle: &str) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "stderr: {stderr}");
    assert!(stderr.contains(needle), "stderr: {stderr}");
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = e4ssl(&["preprocess", path(&dir.path().join("nope.tsv")), "--store", path(&dir.path().join("s"))]);
    assert_fails(&out, 2, "error:");
}

#[test]
fn malformed_manifest_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.tsv");
    std::fs::write(&manifest, "not a manifest\n").unwrap();
    let out = e4ssl(&["preprocess", path(&manifest), "--store", path(&dir.path().join("s"))]);
    assert_fails(&out, 3, "error:");
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.txt");
    std::fs::write(&config, "no_such_key=1\n").unwrap();
    let out = e4ssl(&["--config", path(&config), "synth", "--out", path(&dir.path().join("raw"))]);
    assert_fails(&out, 5, "no_such_key");
}

#[test]
fn bad_pretext_task_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = e4ssl(&["pretrain", "--store", path(dir.path()), "--task", "jigsaw", "--out", path(&dir.path().join("m"))]);
    assert_fails(&out, 5, "jigsaw");
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = e4ssl(&[
        "evaluate",
        "--checkpoint",
        path(&dir.path().join("none.ckpt")),
        "--store",
        path(dir.path()),
        "--out",
        path(&dir.path().join("r.txt")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn synth_then_preprocess_reports_hours() {
    check_offbody_hours("400:200", "0.056");
    // the 100 s worn before the gap is too short to count as wear
    check_offbody_hours("100:200", "0.083");
}

fn check_offbody_hours(offbody: &str, hours: &str) {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    std::fs::write(&spec, format!("subjects_per_class=1\nduration_s=900\nunlabelled=u:1\noffbody={offbody}\nsleep=\n")).unwrap();
    let raw = dir.path().join("raw");
    let out = e4ssl(&["synth", "--spec", path(&spec), "--out", path(&raw)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let store = dir.path().join("store");
    let out = e4ssl(&["--omega", "32", "--delta", "16", "preprocess", path(&raw.join("manifest.tsv")), "--store", path(&store)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split('\t').nth(1) == Some(hours)), "{stdout}");
    assert!(store.join("hours.tsv").exists());
    assert!(store.join("timelines").is_dir());
}
