use std::path::Path;
use std::process::{Command, Output};

use facepencil::evaluator::{ExtractorConfig, ToyAttributeExtractor};
use facepencil::sketch::{encode_sketch_png, rasterize, write_strokes, Point, StrokeSet};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facepencil"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_TOML: &str = "\
batch_size = 2
stage1_steps = 2
stage2_steps = 2
stage3_steps = 2
base_channels = 4
residual_blocks = 4
disc_channels = 4
checkpoint_every = 0
";

#[test]
fn usage_errors_exit_2() {
    let out = bin(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = bin(&["train", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--manifest"));

    let out = bin(&["infer", "--checkpoint", "c", "--sketch", "s.png", "--out", "o.png", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_are_single_tagged_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&[
        "infer",
        "--checkpoint",
        p(&dir.path().join("missing.safetensors")),
        "--sketch",
        "s.png",
        "--out",
        p(&dir.path().join("o.png")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: io: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 3\n").unwrap();
    std::fs::write(dir.path().join("m.txt"), "").unwrap();
    let out = bin(&[
        "train",
        "--config",
        p(&bad),
        "--manifest",
        p(&dir.path().join("m.txt")),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn manifest_and_prepare_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let root = dir.path().join(format!("r{run}"));
        let manifest = root.join("manifest.txt");
        ok(&bin(&["build-manifest", "--train", "4", "--val", "2", "--test", "2", "--seed", "5", "--out", p(&manifest)]));
        let prepared = root.join("prep");
        ok(&bin(&["prepare-data", "--manifest", p(&manifest), "--d", "3", "--seed", "5", "--out", p(&prepared)]));
        let mut files: Vec<(String, Vec<u8>)> = walk(&prepared)
            .into_iter()
            .map(|f| (f.strip_prefix(&prepared).unwrap().display().to_string(), std::fs::read(&f).unwrap()))
            .collect();
        files.sort();
        outputs.push(files);
    }
    assert_eq!(outputs[0].len(), 8 * 4);
    assert_eq!(outputs[0], outputs[1]);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn train_infer_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = d.join("manifest.txt");
    ok(&bin(&["build-manifest", "--train", "4", "--val", "2", "--test", "10", "--out", p(&manifest)]));

    let classifier = d.join("classifier.safetensors");
    ok(&bin(&["pretrain-classifier", "--manifest", p(&manifest), "--epochs", "1", "--out", p(&classifier)]));

    let config = d.join("train.toml");
    std::fs::write(&config, TINY_TOML).unwrap();
    let run = d.join("run");
    ok(&bin(&[
        "train",
        "--config",
        p(&config),
        "--manifest",
        p(&manifest),
        "--classifier",
        p(&classifier),
        "--out",
        p(&run),
    ]));
    let ck = run.join("stage3.safetensors");
    assert!(ck.exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.log")).unwrap().lines().count(), 6);

    // A stroke list and its rasterized PNG give the same image.
    let strokes = StrokeSet {
        strokes: vec![
            vec![Point::new(10.0, 20.0), Point::new(50.0, 22.0)],
            vec![Point::new(32.0, 25.0), Point::new(30.0, 45.0), Point::new(36.0, 46.0)],
        ],
        ..StrokeSet::empty(64, 64)
    };
    let txt = d.join("strokes.txt");
    write_strokes(&strokes, &txt).unwrap();
    let png = d.join("sketch.png");
    std::fs::write(&png, encode_sketch_png(&rasterize(&strokes)).unwrap()).unwrap();
    let (from_png, from_txt) = (d.join("a.png"), d.join("b.png"));
    let att = d.join("att");
    ok(&bin(&[
        "infer",
        "--checkpoint",
        p(&ck),
        "--sketch",
        p(&png),
        "--out",
        p(&from_png),
        "--attention-dir",
        p(&att),
    ]));
    ok(&bin(&["infer", "--checkpoint", p(&ck), "--sketch", p(&txt), "--out", p(&from_txt)]));
    let a = image::open(&from_png).unwrap().to_rgb8();
    assert_eq!(a.dimensions(), (64, 64));
    assert_eq!(a, image::open(&from_txt).unwrap().to_rgb8());
    assert_eq!(std::fs::read_dir(&att).unwrap().count(), 3);

    let extractor = d.join("extractor.safetensors");
    let (ex, _) = ToyAttributeExtractor::train(ExtractorConfig::default(), 32, 1, 0).unwrap();
    ex.save(&extractor).unwrap();
    let report = d.join("report.json");
    let args = [
        "evaluate",
        "--checkpoint",
        p(&ck),
        "--manifest",
        p(&manifest),
        "--d-levels",
        "0,3",
        "--extractor",
        p(&extractor),
        "--splits",
        "1",
        "--out",
        p(&report),
    ];
    ok(&bin(&args));
    let first = std::fs::read(&report).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["d"], 3);
    assert!(rows.iter().all(|r| r["fid"].as_f64().unwrap() >= 0.0 && r["is_mean"].as_f64().unwrap() >= 1.0 - 1e-9));
    ok(&bin(&args));
    assert_eq!(std::fs::read(&report).unwrap(), first);
}
