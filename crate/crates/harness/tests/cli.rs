mod common;

use std::path::Path;
use std::process::{Command, Output};

use sesame::data::io::decode_rgb_png;

fn sesame(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sesame")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(sesame(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sesame(&["train"]).status.code(), Some(2));
    assert_eq!(sesame(&["ablate", "--axis", "colour", "--out", "x"]).status.code(), Some(2));
    assert_eq!(sesame(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sesame(&["eval", "--ckpt", path(&tmp.path().join("missing.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn synth_train_eval_edit_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");

    let out = sesame(&["synth-data", "--out", path(&data), "--count", "6", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());

    let steps = common::STEPS.to_string();
    let out = sesame(&["train", "--data", path(&data), "--steps", &steps, "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count() as u64, common::STEPS);
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists());

    let report = tmp.path().join("report.json");
    let out = sesame(&["eval", "--ckpt", path(&ckpt), "--data", path(&data), "--out", path(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FID"));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["count"], 18);
    assert!(r["ssim_masked"].as_f64().unwrap().is_finite());

    let scene = common::scene(11);
    let (image, labels, edited) = (tmp.path().join("in.png"), tmp.path().join("paint.png"), tmp.path().join("out.png"));
    std::fs::write(&image, common::image_png(&scene)).unwrap();
    std::fs::write(&labels, common::paint_png(&common::paint(7, 12, 12, 28, 28))).unwrap();
    let out = sesame(&[
        "edit",
        "--image",
        path(&image),
        "--labels",
        path(&labels),
        "--ckpt",
        path(&ckpt),
        "--out",
        path(&edited),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result = decode_rgb_png(&std::fs::read(&edited).unwrap()).unwrap();
    let input = decode_rgb_png(&std::fs::read(&image).unwrap()).unwrap();
    assert_eq!(result.pixel(0, 0), input.pixel(0, 0));
    assert_eq!(result.pixel(63, 63), input.pixel(63, 63));

    std::fs::write(&labels, common::paint_png(&[255; 4096])).unwrap();
    let out = sesame(&[
        "edit",
        "--image",
        path(&image),
        "--labels",
        path(&labels),
        "--ckpt",
        path(&ckpt),
        "--out",
        path(&edited),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("painted_labels"));
}

#[test]
fn ablate_writes_one_report_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sesame(&["ablate", "--axis", "discriminator", "--steps", "2", "--count", "2", "--out", path(tmp.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for tag in ["sesame", "patchgan"] {
        assert!(tmp.path().join(tag).join("report.json").exists(), "{tag}");
    }
}
