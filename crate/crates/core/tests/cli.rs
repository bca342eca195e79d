use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddir::grid::{Dims, Field, ScalarGrid};
use ddir::io;
use ddir::phantom::PhantomConfig;

fn ddir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddir"))
        .env("RUST_LOG", "off")
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn write_config(dir: &Path, name: &str, cfg: &PhantomConfig) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string(cfg).unwrap()).unwrap();
    p
}

/// Generates `n` 32x32 phantom pairs under `dir/phantom`.
fn phantom(dir: &Path, n: usize) -> PathBuf {
    let cfg = write_config(dir, "phantom.json", &PhantomConfig::scaled_2d(32));
    let out = dir.join("phantom");
    let o = ddir(&["phantom", "--config", &s(&cfg), "--n", &n.to_string(), "--out", &s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn register_args<'a>(pair: &'a Path, fixed: &'a str, fixed_labels: &'a str) -> Vec<String> {
    vec![
        "register".into(),
        "--moving".into(),
        s(&pair.join("moving")),
        "--fixed".into(),
        s(&pair.join(fixed)),
        "--moving-labels".into(),
        s(&pair.join("labels_moving")),
        "--fixed-labels".into(),
        s(&pair.join(fixed_labels)),
    ]
}

fn run(args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ddir(&refs)
}

#[test]
fn phantom_writes_the_file_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let out = phantom(tmp.path(), 1);
    let pair = out.join("pair_000");
    for name in ["moving", "fixed", "labels_moving", "labels_fixed", "gt_composed", "gt_sub_0", "gt_sub_3"] {
        assert!(pair.join(format!("{name}.json")).exists(), "{name}.json");
        assert!(pair.join(format!("{name}.raw")).exists(), "{name}.raw");
    }
    assert!(out.join("manifest.json").exists());
}

#[test]
fn invalid_radii_exit_2_without_files() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = PhantomConfig { lvbp_radius: 20.0, lvm_outer_radius: 10.0, ..Default::default() };
    let cfg = write_config(tmp.path(), "bad.json", &bad);
    let out = tmp.path().join("out");
    let o = ddir(&["phantom", "--config", &s(&cfg), "--out", &s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn malformed_config_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("broken.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let o = ddir(&["phantom", "--config", &s(&cfg), "--out", &s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn register_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let pair = phantom(tmp.path(), 1).join("pair_000");

    // missing labels file: exit 3 naming the path
    let mut args = register_args(&pair, "fixed", "no_such_labels");
    args.extend(["--out".into(), s(&tmp.path().join("missing"))]);
    let o = run(args);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_labels"));
    assert!(!tmp.path().join("missing").exists());

    // baseline emits exactly one sub-field
    let out = tmp.path().join("baseline");
    let mut args = register_args(&pair, "fixed", "labels_fixed");
    args.extend(["--mode", "baseline", "--iterations", "5", "--out"].map(String::from));
    args.push(s(&out));
    let o = run(args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("sub_field_0.json").exists());
    assert!(!out.join("sub_field_1.json").exists());
    for name in ["warped.raw", "warped_labels.raw", "composed.raw", "loss_trace.csv", "report.json", "manifest.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let trace = std::fs::read_to_string(out.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 5 + 1);
}

#[test]
fn register_shape_mismatch_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let pair = phantom(tmp.path(), 1).join("pair_000");
    let small = ScalarGrid::new(Dims::new(&[16, 16]).unwrap(), vec![1.0, 1.0], vec![0.5; 256]).unwrap();
    io::write_scalar(&pair.join("small"), &small).unwrap();
    let mut args = register_args(&pair, "small", "labels_fixed");
    args.extend(["--out".into(), s(&tmp.path().join("out"))]);
    assert_eq!(run(args).status.code(), Some(4));
}

#[test]
fn register_identical_pair_barely_moves() {
    let tmp = tempfile::tempdir().unwrap();
    let pair = phantom(tmp.path(), 1).join("pair_000");
    let out = tmp.path().join("same");
    let cfg = tmp.path().join("deterministic.json");
    std::fs::write(&cfg, r#"{"sample_during_training": false}"#).unwrap();
    let mut args = register_args(&pair, "moving", "labels_moving");
    args.extend(["--config".into(), s(&cfg), "--out".into(), s(&out)]);
    let o = run(args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let u = io::read_vector(&out.join("composed")).unwrap();
    let mean = (0..u.dims().len()).map(|i| u.norm_at(i)).sum::<f64>() / u.dims().len() as f64;
    assert!(mean < 0.05, "mean |u| {mean}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pre"]["avg_dice"].as_f64(), Some(1.0));
    assert!(report["avg_dice"].as_f64().unwrap() > 0.99);
}

#[test]
fn view_constant_grid_is_uniform() {
    let tmp = tempfile::tempdir().unwrap();
    let g = ScalarGrid::new(Dims::new(&[5, 4]).unwrap(), vec![1.0, 1.0], vec![2.5; 20]).unwrap();
    io::write_scalar(&tmp.path().join("c"), &g).unwrap();
    let img = tmp.path().join("c.pgm");
    let o = ddir(&["view", "--grid", &s(&tmp.path().join("c")), "--out", &s(&img)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(&img).unwrap();
    let header = b"P5\n5 4\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let pixels = &bytes[header.len()..];
    assert_eq!(pixels.len(), 20);
    assert!(pixels.iter().all(|&p| p == pixels[0]));
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("c.pgm.json")).unwrap()).unwrap();
    assert_eq!(side["min"].as_f64(), Some(2.5));
    assert_eq!(side["max"].as_f64(), Some(2.5));

    let o = ddir(&["view", "--grid", &s(&tmp.path().join("c")), "--slice", "1", "--out", &s(&tmp.path().join("d.pgm"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(!tmp.path().join("d.pgm").exists());
}

#[test]
fn train_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantom(tmp.path(), 2);
    let out = tmp.path().join("weights");
    let o = ddir(&["train", "--data", &s(&data), "--epochs", "1", "--out", &s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    for field in rows[0].iter().filter(|f| !f.is_empty()) {
        assert!(field.parse::<f64>().unwrap().is_finite());
    }
    assert!(out.join("weights.json").exists());
}
