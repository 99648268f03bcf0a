use std::path::Path;
use std::process::{Command, Output};

use picoseg::coco::parse_annotations;
use picoseg::imageio::read_image;
use picoseg::loss::read_cache;
use picoseg::net::{bias_name, build, save_weights, NetSpec};
use serde_json::Value;

fn picoseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_picoseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = picoseg(args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_json(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(2));
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, n: usize) {
    let out = picoseg(&[
        "synth-data",
        "--seed",
        "3",
        "--n",
        &n.to_string(),
        "--out",
        s(dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn count_reports_default_model() {
    let r = ok_json(&["count"]);
    let mut keys: Vec<&str> = r.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        ["fp32_bytes", "input_size", "int8_bytes", "macs", "params"]
    );
    let params = r["params"].as_u64().unwrap();
    let macs = r["macs"].as_u64().unwrap();
    assert!((1_260_000..=1_480_000).contains(&params));
    assert!((293_000_000..=397_000_000).contains(&macs));

    // compute scales with the pixel count, parameters do not
    let half = ok_json(&["count", "--size", "48"]);
    assert_eq!(half["params"].as_u64(), Some(params));
    let ratio = half["macs"].as_u64().unwrap() as f64 / macs as f64;
    assert!((ratio - 0.25).abs() < 0.25 * 0.05, "{ratio}");
}

#[test]
fn synth_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), 4);
    synth(b.path(), 4);
    for rel in [
        "annotations.json",
        "teacher.ptc",
        "images/scene_0001.ppm",
        "masks/ann_0004.pgm",
    ] {
        let x = std::fs::read(a.path().join(rel)).unwrap();
        let y = std::fs::read(b.path().join(rel)).unwrap();
        assert!(x == y, "{rel} differs");
    }

    let ds = parse_annotations(a.path().join("annotations.json")).unwrap();
    assert_eq!(ds.annotations.len(), 4);
    assert_eq!(ds.warnings, 0);
    let records = read_cache(a.path().join("teacher.ptc")).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| (0.6..=1.0).contains(&r.confidence)));
    let img = read_image(a.path().join("images/scene_0001.ppm")).unwrap();
    assert_eq!(
        (img.width(), img.height()),
        (ds.images[0].width, ds.images[0].height)
    );
}

#[test]
fn oracle_eval_is_perfect_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 6);
    let ann = dir.path().join("annotations.json");
    let images = dir.path().join("images");
    let args = [
        "eval",
        "--ann",
        s(&ann),
        "--images-dir",
        s(&images),
        "--backend",
        "oracle",
    ];
    let r = ok_json(&args);
    assert_eq!(r["miou"].as_f64(), Some(1.0));
    assert_eq!(r["map"].as_f64(), Some(1.0));
    assert_eq!(r["per_instance"].as_array().unwrap().len(), 6);
    assert_eq!(ok_json(&args), r);

    let report = dir.path().join("report.json");
    let mut with_out = args.to_vec();
    with_out.extend(["--out", s(&report)]);
    let out = picoseg(&with_out);
    assert!(out.status.success() && out.stdout.is_empty());
    let saved: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(saved, r);
}

#[test]
fn eval_rejects_empty_annotation_file() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("empty.json");
    std::fs::write(&ann, r#"{"images": [], "annotations": []}"#).unwrap();
    let out = picoseg(&[
        "eval",
        "--ann",
        s(&ann),
        "--images-dir",
        s(dir.path()),
        "--backend",
        "oracle",
    ]);
    assert_eq!(error_json(&out)["error"], "coco");
}

fn zero_model(dir: &Path, bias: f32) -> std::path::PathBuf {
    let spec = NetSpec::default();
    let head = bias_name("head");
    let store = build(&spec, 0)
        .unwrap()
        .map(|name, _| if name == head { bias } else { 0.0 });
    let path = dir.join(format!("zero_{bias}.psw"));
    save_weights(&store, &path).unwrap();
    path
}

#[test]
fn infer_follows_head_bias_on_zero_weights() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let image = dir.path().join("images/scene_0001.ppm");
    for (bias, full) in [(0.7f32, true), (-0.7, false)] {
        let weights = zero_model(dir.path(), bias);
        let out_path = dir.path().join("mask.pgm");
        let out = picoseg(&[
            "infer",
            "--image",
            s(&image),
            "--bbox",
            "20,30,40,24",
            "--weights",
            s(&weights),
            "--out",
            s(&out_path),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let sidecar: Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("mask.json")).unwrap()).unwrap();
        let (w, h) = (
            sidecar["mask"]["width"].as_u64().unwrap(),
            sidecar["mask"]["height"].as_u64().unwrap(),
        );
        let expect = if full { w * h } else { 0 };
        assert_eq!(sidecar["mask"]["foreground"].as_u64(), Some(expect));
        assert_eq!(sidecar["params_used"]["backend"], "fp32");
        assert!(sidecar["latency_ms"].as_f64().unwrap() >= 0.0);
        let pgm = std::fs::read(&out_path).unwrap();
        assert!(pgm.starts_with(b"P5"));
    }
}

#[test]
fn infer_reports_roi_errors() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let image = dir.path().join("images/scene_0001.ppm");
    let out = picoseg(&[
        "infer",
        "--image",
        s(&image),
        "--bbox",
        "900,900,10,10",
        "--backend",
        "oracle",
        "--out",
        s(&dir.path().join("m.pgm")),
    ]);
    assert_eq!(error_json(&out)["error"], "roi");

    let out = picoseg(&[
        "infer",
        "--image",
        s(&image),
        "--bbox",
        "1,2,3",
        "--out",
        "m.pgm",
    ]);
    assert!(!out.status.success());
}

#[test]
fn quantize_writes_compact_model() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 3);
    let weights = dir.path().join("w.psw");
    save_weights(&build(&NetSpec::default(), 42).unwrap(), &weights).unwrap();
    let q = dir.path().join("m.psq");
    let r = ok_json(&[
        "quantize",
        "--weights",
        s(&weights),
        "--images-dir",
        s(&dir.path().join("images")),
        "--batches",
        "2",
        "--out",
        s(&q),
    ]);
    assert_eq!(r["batches"].as_u64(), Some(2));
    assert!(r["compression"].as_f64().unwrap() >= 3.3);
    assert_eq!(
        r["int8_bytes"].as_u64(),
        Some(std::fs::metadata(&q).unwrap().len())
    );
    assert!(r["divergence"]["sign_agreement"].as_f64().unwrap() >= 0.95);

    let empty = tempfile::tempdir().unwrap();
    let out = picoseg(&[
        "quantize",
        "--weights",
        s(&weights),
        "--images-dir",
        s(empty.path()),
        "--out",
        s(&q),
    ]);
    assert_eq!(error_json(&out)["error"], "quant");
}

#[test]
fn fit_head_writes_loadable_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("tuned.psw");
    let args = [
        "fit-head",
        "--steps",
        "3",
        "--samples",
        "2",
        "--out",
        s(&out_path),
    ];
    let r = ok_json(&args);
    assert_eq!(r["trace"].as_array().unwrap().len(), 3);
    assert_eq!(r["samples"].as_u64(), Some(2));
    let again = ok_json(&args);
    assert_eq!(r["trace"], again["trace"]);
    picoseg::net::load_weights_for(&out_path, &NetSpec::default()).unwrap();
}

#[test]
fn make_cache_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ptc");
    let out = picoseg(&["make-cache", "--n", "3", "--out", s(&path)]);
    assert!(out.status.success());
    let records = read_cache(&path).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.logits.is_finite()));
}

#[test]
fn help_lists_defaults() {
    let out = picoseg(&["fit-head", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for needle in ["[default: 200]", "[default: 0.0003]", "[default: 42]"] {
        assert!(text.contains(needle), "missing {needle}:\n{text}");
    }
    let out = picoseg(&["serve", "--help"]);
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .contains("127.0.0.1:8080"));
}

#[test]
fn unknown_backend_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let out = picoseg(&[
        "infer",
        "--image",
        s(&dir.path().join("images/scene_0001.ppm")),
        "--bbox",
        "10,10,20,20",
        "--backend",
        "tpu",
        "--out",
        s(&dir.path().join("m.pgm")),
    ]);
    let err = error_json(&out);
    assert!(err["message"].as_str().unwrap().contains("tpu"));
}

#[test]
fn fit_head_trains_on_coco_with_cache() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2);
    let out_path = dir.path().join("tuned.psw");
    let r = ok_json(&[
        "fit-head",
        "--steps",
        "2",
        "--ann",
        s(&dir.path().join("annotations.json")),
        "--images-dir",
        s(&dir.path().join("images")),
        "--cache",
        s(&dir.path().join("teacher.ptc")),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(r["samples"].as_u64(), Some(2));

    // a cache from a different run lacks these annotation ids
    let other = dir.path().join("other.ptc");
    assert!(
        picoseg(&["make-cache", "--seed", "9", "--n", "1", "--out", s(&other)])
            .status
            .success()
    );
    let out = picoseg(&[
        "fit-head",
        "--steps",
        "1",
        "--ann",
        s(&dir.path().join("annotations.json")),
        "--images-dir",
        s(&dir.path().join("images")),
        "--cache",
        s(&other),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(error_json(&out)["error"], "cache");
}
