use std::path::Path;
use std::process::{Command, Output};

use wsi_screen::cli::{TruthRow, VerdictRow};
use wsi_screen::metrics::{evaluate, MetricsReport};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsi-screen")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn synth_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", &s(d), "--tiles", "100", "--seed", "0", "--tile-size", "64"]);
    }
    let ann = |d: &Path| std::fs::read(d.join("annotations.csv")).unwrap();
    assert_eq!(ann(&a), ann(&b));
    for i in [0, 37, 99] {
        let name = format!("tiles/t{i:05}.png");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    let text = String::from_utf8(ann(&a)).unwrap();
    assert!(text.starts_with("tile_id,label,x_min,y_min,x_max,y_max\n"));
    assert_eq!(text.lines().filter(|l| l.contains(",negative,")).count(), 50);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["verb"], "synth");
    assert_eq!(manifest["config"]["seed"], 0);
    assert!(manifest["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
}

#[test]
fn infer_single_slide_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("run.toml");
    std::fs::write(&config, "tile_size = 64\nepochs = 1\nwsi_epochs = 1\npt = false\n").unwrap();
    let data = root.join("data");
    ok(&["synth", "--out", &s(&data), "--tiles", "10", "--slides", "4", "--tiles-per-slide", "4", "--tile-size", "64"]);
    ok(&["train-tile", "--config", &s(&config), "--data", &s(&data), "--out", &s(&root.join("tile"))]);
    let ckpt = root.join("tile/tile.ckpt");

    // Threshold aggregation when the checkpoint holds no aggregator.
    let slide = data.join("slides/s0000.json");
    ok(&["infer", "--config", &s(&config), "--ckpt", &s(&ckpt), "--slide", &s(&slide), "--out", &s(&root.join("one"))]);
    let rows: Vec<VerdictRow> = csv::Reader::from_path(root.join("one/verdicts.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].slide_id, "s0000");
    assert_eq!(rows[0].pred, u8::from(rows[0].score > 0.5));

    ok(&["train-wsi", "--config", &s(&config), "--ckpt", &s(&ckpt), "--data", &s(&data), "--out", &s(&root.join("wsi"))]);
    let all = root.join("all");
    ok(&["infer", "--config", &s(&config), "--ckpt", &s(&root.join("wsi/wsi.ckpt")), "--data", &s(&data), "--out", &s(&all)]);
    ok(&["eval", "--pred", &s(&all.join("verdicts.csv")), "--truth", &s(&data.join("labels.csv")), "--out", &s(&all)]);

    let preds: Vec<VerdictRow> = csv::Reader::from_path(all.join("verdicts.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    let truth: Vec<TruthRow> = csv::Reader::from_path(data.join("labels.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(preds.len(), 4);
    let scores: Vec<f64> = preds.iter().map(|p| p.score as f64).collect();
    let labels: Vec<bool> = preds
        .iter()
        .map(|p| truth.iter().find(|t| t.slide_id == p.slide_id).unwrap().label == 1)
        .collect();
    let expected = evaluate(&scores, &labels).unwrap();
    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(all.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.folds, vec![expected]);
    assert_eq!(report.mean, expected);
}

#[test]
fn cam_writes_one_overlay_per_tile() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("run.toml");
    std::fs::write(&config, "tile_size = 64\nepochs = 0\npt = false\ncl = false\n").unwrap();
    let data = root.join("data");
    ok(&["synth", "--out", &s(&data), "--tiles", "10", "--tile-size", "64"]);
    ok(&["train-tile", "--config", &s(&config), "--data", &s(&data), "--out", &s(&root.join("tile"))]);
    let out = root.join("cam");
    ok(&[
        "cam",
        "--ckpt",
        &s(&root.join("tile/tile.ckpt")),
        "--data",
        &s(&data),
        "--tile",
        "t00001",
        "--tile",
        "t00004",
        "--out",
        &s(&out),
    ]);
    let mut names: Vec<String> = std::fs::read_dir(out.join("cam"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["t00001.png", "t00004.png"]);
    let img = wsi_screen::tiling::load_image(&out.join("cam/t00001.png")).unwrap();
    assert_eq!((img.height(), img.width()), (64, 64));
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["eval", "--pred", "x.csv"]).status.code(), Some(1));
    assert_eq!(bin(&["train-tile", "--out", &out]).status.code(), Some(1));
    assert_eq!(bin(&["infer", "--ckpt", "missing.ckpt", "--out", &out]).status.code(), Some(1));
    assert_eq!(bin(&["synth", "--out", &out, "--tiles", "0"]).status.code(), Some(1));
    let usage = bin(&["frobnicate"]);
    assert!(String::from_utf8_lossy(&usage.stderr).contains("Usage"));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn pt_without_detector_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", &s(&data), "--tiles", "6", "--tile-size", "64"]);
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "tile_size = 64\nepochs = 1\n").unwrap();
    let out = bin(&["train-tile", "--config", &s(&config), "--data", &s(&data), "--pt", "--out", &s(&dir.path().join("t"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));
}
