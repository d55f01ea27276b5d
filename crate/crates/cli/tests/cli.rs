use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egomocap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, value: serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Writes a three-frame bundle into `dir/bundle`.
fn make_bundle(dir: &Path, noise: f64) {
    let cfg = dir.join("synth.json");
    write(
        &cfg,
        json!({
            "frames": 3,
            "image_size": [96, 80],
            "detection_noise_sigma": noise,
            "rng_seed": 9,
            "output": "bundle"
        }),
    );
    let out = run(&["synth", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn track_config(dir: &Path, name: &str, weights: serde_json::Value) -> std::path::PathBuf {
    let cfg = dir.join(format!("{name}.json"));
    write(
        &cfg,
        json!({
            "input": "bundle",
            "output": format!("{name}_poses.jsonl"),
            "solver": { "max_iterations": 15 },
            "weights": weights
        }),
    );
    cfg
}

#[test]
fn synth_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    make_bundle(dir.path(), 1.0);
    let bundle = dir.path().join("bundle");
    for file in [
        "manifest.json",
        "gt_poses.jsonl",
        "detections.jsonl",
        "calibration.json",
    ] {
        assert!(bundle.join(file).exists(), "{file}");
    }
    let first = fs::read(bundle.join("detections.jsonl")).unwrap();
    let image = fs::read(bundle.join("images/frame_00002_left.png")).unwrap();
    make_bundle(dir.path(), 1.0);
    assert_eq!(fs::read(bundle.join("detections.jsonl")).unwrap(), first);
    assert_eq!(fs::read(bundle.join("images/frame_00002_left.png")).unwrap(), image);
}

#[test]
fn track_output_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    make_bundle(dir.path(), 1.0);
    let one = track_config(dir.path(), "one", json!({}));
    let four = track_config(dir.path(), "four", json!({}));
    let out = run(&["track", one.to_str().unwrap(), "--threads", "1", "--trace"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["--threads", "4", "track", four.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = fs::read(dir.path().join("one_poses.jsonl")).unwrap();
    let b = fs::read(dir.path().join("four_poses.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
    let trace = fs::read_to_string(dir.path().join("one_poses_trace.jsonl")).unwrap();
    assert!(trace.lines().count() > 3);
    assert!(!dir.path().join("four_poses_trace.jsonl").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("one_poses_summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 3);
}

#[test]
fn evaluate_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    make_bundle(dir.path(), 0.0);
    let cfg = dir.path().join("eval.json");
    write(
        &cfg,
        json!({
            "predicted": "bundle/gt_poses.jsonl",
            "ground_truth": "bundle/gt_poses.jsonl",
            "calibration": "bundle/calibration.json",
            "skeleton": "bundle/skeleton.json",
            "output": "report.json"
        }),
    );
    let out = run(&["evaluate", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pck"], 100.0);
    assert_eq!(report["error3d_mean_m"], 0.0);
    assert_eq!(report["error3d_std_m"], 0.0);
    assert!(report["per_joint"].as_object().unwrap().len() > 5);
}

#[test]
fn overlay_writes_one_image_per_item() {
    let dir = tempfile::tempdir().unwrap();
    make_bundle(dir.path(), 0.0);
    let cfg = dir.path().join("overlay.json");
    write(
        &cfg,
        json!({
            "calibration": "bundle/calibration.json",
            "skeleton": "bundle/skeleton.json",
            "poses": "bundle/gt_poses.jsonl",
            "items": [
                { "frame": 0, "camera": "left", "image": "bundle/images/frame_00000_left.png" },
                { "frame": 1, "camera": "right" }
            ],
            "output": "overlays"
        }),
    );
    let out = run(&["overlay", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("overlays/overlay_00000_left.png").exists());
    assert!(dir.path().join("overlays/overlay_00001_right.png").exists());
}

#[test]
fn augment_is_reproducible_from_seed() {
    let dir = tempfile::tempdir().unwrap();
    make_bundle(dir.path(), 0.0);
    let backgrounds = dir.path().join("backgrounds");
    fs::create_dir_all(&backgrounds).unwrap();
    for (i, color) in [[40u8, 40, 200], [200, 120, 30]].iter().enumerate() {
        image::RgbImage::from_pixel(128, 100, image::Rgb(*color))
            .save(backgrounds.join(format!("bg{i}.png")))
            .unwrap();
    }
    let mut green = image::RgbImage::from_pixel(96, 80, image::Rgb([20, 220, 40]));
    for y in 20..60 {
        for x in 30..70 {
            green.put_pixel(x, y, image::Rgb([200, 60, 60]));
        }
    }
    green.save(dir.path().join("green.png")).unwrap();
    let manifest = |out: &str| {
        json!({
            "calibration": "bundle/calibration.json",
            "skeleton": "bundle/skeleton.json",
            "frames": [
                { "frame": 0, "camera": "left", "image": "green.png", "gt_pose": "bundle/gt_poses.jsonl" },
                { "frame": 2, "camera": "right", "image": "green.png", "gt_pose": "bundle/gt_poses.jsonl" }
            ],
            "augment": {
                "key_color": [0.08, 0.86, 0.16],
                "chroma_tolerance": 0.2,
                "background_source": "backgrounds",
                "rng_seed": 1
            },
            "output": out
        })
    };
    write(&dir.path().join("a.json"), manifest("aug_a"));
    write(&dir.path().join("b.json"), manifest("aug_b"));
    for name in ["a.json", "b.json"] {
        let out = run(&["augment", dir.path().join(name).to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in [
        "annotations.jsonl",
        "images/00000_0_left.png",
        "images/00001_2_right.png",
    ] {
        let a = fs::read(dir.path().join("aug_a").join(file)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("aug_b").join(file)).unwrap(), "{file}");
    }
    let out = run(&["augment", dir.path().join("b.json").to_str().unwrap(), "--seed", "2"]);
    assert_eq!(code(&out), 0);
    let a = fs::read(dir.path().join("aug_a/images/00000_0_left.png")).unwrap();
    let c = fs::read(dir.path().join("aug_b/images/00000_0_left.png")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["track"])), 1);
    assert_eq!(code(&run(&["frobnicate", "x.json"])), 1);
    assert_eq!(code(&run(&["--threads", "0", "track", "x.json"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&run(&["track", dir.path().join("missing.json").to_str().unwrap()])),
        2
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&run(&["evaluate", bad.to_str().unwrap()])), 2);

    make_bundle(dir.path(), 3.0);
    let overflow = track_config(dir.path(), "overflow", json!({ "w_detection": 1e308 }));
    let out = run(&["track", overflow.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
