use std::path::Path;
use std::process::{Command, Output};

fn usat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usat"))
        .args(args)
        .current_dir(cwd)
        .env("USAT_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// Parses a binary PNM header, returning (magic, width, height, payload length).
fn pnm_header(bytes: &[u8]) -> (String, usize, usize, usize) {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    assert_eq!(fields[3], "255");
    (
        fields[0].clone(),
        fields[1].parse().unwrap(),
        fields[2].parse().unwrap(),
        bytes.len() - pos - 1,
    )
}

#[test]
fn help_matches_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(usat(&["--help"], dir.path()));
    let expected = include_str!("snapshots/help.txt");
    assert_eq!(stdout(&out), expected);
}

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&ok(usat(&["--help"], dir.path())));
    for flag in [
        "--config",
        "--seed",
        "--out",
        "--data",
        "--bands",
        "--sensors",
        "--mask-ratio",
        "--epochs",
        "--preset",
        "--group-index-mode",
        "--workers",
    ] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(usat(&["synth", "--seed", "7", "--n", "6", "--geometry", "desk", "--out", name], dir.path()));
    }
    let manifest = |d: &str| std::fs::read(dir.path().join(d).join("manifest.json")).unwrap();
    assert_eq!(manifest("a"), manifest("b"));
    let mut files: Vec<_> = std::fs::read_dir(dir.path().join("a/rasters"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    assert!(!files.is_empty());
    for f in files {
        let a = std::fs::read(dir.path().join("a/rasters").join(&f)).unwrap();
        let b = std::fs::read(dir.path().join("b/rasters").join(&f)).unwrap();
        assert_eq!(a, b, "{f:?} differs");
    }
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"run": {"epochz": 3}}"#).unwrap();
    let out = usat(&["synth", "--config", "c.json", "--out", "ds"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochz"));
    assert!(err.contains("\"geometry\""), "schema not printed");
}

#[test]
fn bad_flag_value_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(usat(&["pretrain", "--preset", "huge"], dir.path()).status.code(), Some(1));
    assert_eq!(usat(&["pretrain", "--out", "x"], dir.path()).status.code(), Some(1));
}

#[test]
fn missing_store_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = usat(&["pretrain", "--data", "nowhere", "--out", "x", "--preset", "tiny"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn geometry_mismatch_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(usat(&["synth", "--seed", "1", "--n", "4", "--geometry", "desk", "--out", "ds"], d));
    let out = usat(
        &["pretrain", "--data", "ds", "--out", "ck", "--preset", "tiny", "--geometry", "usatlas", "--epochs", "1"],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("geometry mismatch"));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let common = ["--geometry", "desk", "--preset", "tiny", "--batch-size", "4"];
    let with = |args: &[&str]| -> Vec<String> { args.iter().chain(common.iter()).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| ok(usat(&args.iter().map(String::as_str).collect::<Vec<_>>(), d));

    run(with(&["synth", "--seed", "3", "--n", "8", "--out", "ds"]));
    let pair = run(with(&["pair", "--fine", "ds", "--coarse", "ds", "--out", "paired"]));
    let report: serde_json::Value = serde_json::from_slice(&pair.stdout).unwrap();
    assert_eq!(report["written"], 8);

    run(with(&["pretrain", "--data", "paired", "--out", "ck", "--epochs", "2", "--lr", "4e-3"]));
    let log = std::fs::read_to_string(d.join("ck/train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    for (i, l) in lines.iter().enumerate() {
        assert!(l.starts_with(&format!("step={i} lr=")) && l.contains(" loss="), "{l}");
    }

    run(with(&[
        "finetune", "--ckpt", "ck", "--data", "paired", "--out", "ft", "--epochs", "2", "--sensors", "sentinel2", "--bands",
        "Red,Green",
    ]));
    let ft: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ft/metrics.json")).unwrap()).unwrap();
    let transferred: Vec<String> = serde_json::from_value(ft["transferred"].clone()).unwrap();
    let proj: Vec<&String> = transferred.iter().filter(|n| n.starts_with("proj.")).collect();
    assert_eq!(proj.len(), 4, "{proj:?}");

    let eval = run(vec![
        "evaluate".into(), "--ckpt".into(), "ft".into(), "--data".into(), "paired".into(), "--bands".into(),
        "Red,Green".into(), "--sensors".into(), "sentinel2".into(),
    ]);
    let metrics: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(metrics["micro_ap"].as_f64().unwrap().is_finite());
    assert!(metrics["macro_ap"].as_f64().unwrap().is_finite());

    run(vec![
        "reconstruct".into(), "--ckpt".into(), "ck".into(), "--data".into(), "paired".into(), "--out".into(), "rec".into(),
        "--n".into(), "1".into(),
    ]);
    let mut names: Vec<String> = std::fs::read_dir(d.join("rec"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for name in &names {
        let bytes = std::fs::read(d.join("rec").join(name)).unwrap();
        let (magic, w, h, payload) = pnm_header(&bytes);
        assert_eq!(magic, "P6");
        assert_eq!(w, 3 * h + 4);
        assert_eq!(payload, w * h * 3);
    }

    run(with(&["encviz", "--out", "viz", "--group", "1"]));
    let bytes = std::fs::read(d.join("viz/sim_3_3.pgm")).unwrap();
    let (magic, w, h, payload) = pnm_header(&bytes);
    assert_eq!((magic.as_str(), w, h, payload), ("P5", 8, 8, 8 * 8));
}
