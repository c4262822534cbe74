use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "synth": {"landmarks": 400, "train_views": 10, "query_views": 3, "max_observations": 100, "min_visible": 40},
  "train": {"grid": [{"n_trees": 20, "features_per_split": 40}]}
}"#;

fn cloudloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudloc"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn stage_by_stage_on_a_synthetic_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.json"), SMALL).unwrap();
    ok(&cloudloc(d, &["--config", "cfg.json", "synth", "--out", "scene", "--seed", "5"]));
    ok(&cloudloc(
        d,
        &[
            "--config", "cfg.json", "mine", "--tracks", "scene/tracks.json", "--cloud-desc", "scene/cloud.dsc",
            "--desc2d-dir", "scene/desc2d", "--out", "train.trs", "--alpha", "0.05",
        ],
    ));
    let meta = json(&d.join("train.trs.json"));
    assert!(meta["positives"].as_u64().unwrap() > 100);
    ok(&cloudloc(d, &["--config", "cfg.json", "train", "--data", "train.trs", "--out", "model.json"]));
    assert_eq!(json(&d.join("model.json"))["trees"].as_array().unwrap().len(), 20);

    let tracks = json(&d.join("scene/tracks.json"));
    let query = tracks["images"].as_array().unwrap().iter().find(|i| i["query"] == true).unwrap();
    fs::write(d.join("k.json"), query["intrinsics"].to_string()).unwrap();
    fs::create_dir(d.join("results")).unwrap();
    ok(&cloudloc(
        d,
        &[
            "--config", "cfg.json", "match", "--model", "model.json", "--cloud-desc", "scene/cloud.dsc",
            "--image-desc", "scene/desc2d/query_000.dsc", "--out", "matches.json", "--top-k", "2",
        ],
    ));
    let matches = json(&d.join("matches.json"));
    assert!(!matches.as_array().unwrap().is_empty());
    assert!(matches[0]["probability"].as_f64().unwrap() >= 0.5);
    for q in ["query_000", "query_001", "query_002"] {
        ok(&cloudloc(
            d,
            &[
                "--config", "cfg.json", "localize", "--model", "model.json", "--cloud-desc", "scene/cloud.dsc",
                "--image-desc", &format!("scene/desc2d/{q}.dsc"), "--intrinsics", "k.json", "--out",
                &format!("results/{q}.json"),
            ],
        ));
    }
    let r = json(&d.join("results/query_000.json"));
    assert_eq!(r["status"], "localized");
    for key in ["rotation", "center", "inliers", "nll", "timings"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }

    let out = cloudloc(
        d,
        &[
            "evaluate", "--results", "results", "--ground-truth", "scene/ground_truth.json", "--out", "report.json",
            "--csv", "table.csv",
        ],
    );
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Position (m)") && stdout.contains("Angle (degrees)"));
    let report = json(&d.join("report.json"));
    assert_eq!(report["summary"]["localized"], 3);
    assert!(fs::read_to_string(d.join("table.csv")).unwrap().starts_with("metric,median,p25"));
}

#[test]
fn synthetic_pipeline_command() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.json"), SMALL).unwrap();
    let out = cloudloc(d, &["--config", "cfg.json", "pipeline", "--synthetic", "--seed", "5", "--workdir", "work"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("localized 3 of 3"));
    for f in ["report.json", "table.txt", "table.csv", "model.json", "training.trs", "stages.json"] {
        assert!(d.join("work").join(f).exists(), "{f}");
    }
}

fn ascii_ply(path: &Path, n: usize) {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        n * n + 1
    );
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (i as f64 * 0.1, j as f64 * 0.1);
            let z = 0.3 * ((x * 3.0).sin() * (y * 2.0).cos());
            let c = ((i * 37 + j * 11) % 256) as u8;
            s.push_str(&format!("{x} {y} {z} {c} {c} {c}\n"));
        }
    }
    s.push_str("50 50 50 0 0 0\n");
    fs::write(path, s).unwrap();
}

#[test]
fn point_cloud_and_image_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ascii_ply(&d.join("cloud.ply"), 30);
    ok(&cloudloc(d, &["filter", "--input", "cloud.ply", "--output", "clean.ply", "--ascii", "--k", "8"]));
    let clean = fs::read_to_string(d.join("clean.ply")).unwrap();
    assert!(clean.contains("element vertex 900\n"), "outlier should be removed");
    ok(&cloudloc(d, &["extract3d", "--cloud", "clean.ply", "--out", "cloud.dsc"]));
    assert!(json(&d.join("cloud.dsc.json"))["spacing"].as_f64().unwrap() > 0.0);
    assert_eq!(&fs::read(d.join("cloud.dsc")).unwrap()[..5], b"DSC1\x03");

    let (w, h) = (96usize, 96usize);
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let blob = |cx: f64, cy: f64| (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / 18.0).exp();
            let v = 30.0 + 200.0 * (blob(30.0, 30.0) + blob(64.0, 50.0) + blob(40.0, 70.0));
            pgm.push(v.min(255.0) as u8);
        }
    }
    fs::write(d.join("img.pgm"), pgm).unwrap();
    ok(&cloudloc(d, &["extract2d", "--image", "img.pgm", "--out", "img.dsc"]));
    assert_eq!(&fs::read(d.join("img.dsc")).unwrap()[..5], b"DSC1\x02");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // Missing file: invalid input.
    let out = cloudloc(d, &["filter", "--input", "nope.ply", "--output", "x.ply"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ply"));
    // Unknown config key: invalid input.
    fs::write(d.join("bad.json"), r#"{"localise": {}}"#).unwrap();
    assert_eq!(cloudloc(d, &["--config", "bad.json", "synth", "--out", "s"]).status.code(), Some(2));
    // Usage error.
    assert_eq!(cloudloc(d, &["localize", "--model", "m.json"]).status.code(), Some(2));
    // A stage that cannot proceed on valid input.
    fs::write(d.join("cfg.json"), SMALL).unwrap();
    ok(&cloudloc(d, &["--config", "cfg.json", "synth", "--out", "scene"]));
    ok(&cloudloc(
        d,
        &[
            "--config", "cfg.json", "mine", "--tracks", "scene/tracks.json", "--cloud-desc", "scene/cloud.dsc",
            "--desc2d-dir", "scene/desc2d", "--out", "t.trs", "--alpha", "0.05", "--beta", "1e6",
        ],
    ));
    let out = cloudloc(d, &["--config", "cfg.json", "train", "--data", "t.trs", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
