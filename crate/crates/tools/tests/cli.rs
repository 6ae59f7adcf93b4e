//! End-to-end runs of the `ilpforge` binary.

use std::path::Path;
use std::process::{Command, Output};

fn ilpforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilpforge")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ilpforge(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    ilpforge(dir, args).status.code().unwrap()
}

#[test]
fn full_pipeline_on_phantoms() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["--seed", "11", "phantom", "--out-dir", "ph", "--count", "3", "--gz"]);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ph/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["files"][0]["image"], "case_0000_image.nii.gz");

    let fit = ok(d, &["build-ilp", "--manifest", "ph/manifest.json", "--out", "ilp.json"]);
    assert!(fit.starts_with("samples "));
    let curve = std::fs::read_to_string(d.join("ilp.csv")).unwrap();
    assert!(curve.starts_with("hu,ilp,count\n-1024,"));
    assert_eq!(curve.lines().count(), 1 + 4096);

    ok(d, &["apply-ilp", "--model", "ilp.json", "--image", "ph/case_0000_image.nii.gz", "--out", "map.nii"]);
    ok(d, &["--set", "train.epochs=2", "train", "--manifest", "ph/manifest.json", "--model", "ilp.json", "--out", "net.ilpt", "--history", "h.csv"]);
    let history = std::fs::read_to_string(d.join("h.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    ok(d, &[
        "predict", "--params", "net.ilpt", "--image", "ph/case_0001_image.nii.gz", "--out", "prob.nii", "--mask-out", "pred.nii",
    ]);
    let seg: serde_json::Value =
        serde_json::from_str(&ok(d, &["eval-seg", "--pred", "pred.nii", "--gt", "ph/case_0001_mask.nii.gz"])).unwrap();
    let dice = seg["per_case_dice"]["mean"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&dice));
    let det: serde_json::Value =
        serde_json::from_str(&ok(d, &["eval-det", "--pred", "prob.nii", "--gt", "ph/case_0001_mask.nii.gz"])).unwrap();
    assert!((0.0..=100.0).contains(&det["ap"].as_f64().unwrap()));

    ok(d, &["resample", "--image", "ph/case_0000_mask.nii.gz", "--mask", "--spacing", "2", "--out", "small.nii"]);
    ok(d, &["diffuse", "--image", "ph/case_0000_image.nii.gz", "--out", "smooth.nii"]);
    ok(d, &["plot-curve", "--model", "ilp.json", "--out", "plot.csv", "--manifest", "ph/manifest.json"]);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for run in ["a", "b"] {
        ok(d, &["--seed", "5", "phantom", "--out-dir", run, "--count", "2"]);
        let manifest = format!("{run}/manifest.json");
        ok(d, &["build-ilp", "--manifest", &manifest, "--out", &format!("{run}.json")]);
        ok(d, &["--seed", "5", "--set", "train.epochs=1", "train", "--manifest", &manifest, "--model", &format!("{run}.json"), "--out", &format!("{run}.ilpt"), "--history", &format!("{run}.csv")]);
        ok(d, &["--seed", "3", "study", "--smoke", "--out", &format!("{run}-study.json")]);
    }
    for (x, y) in [
        ("a/case_0001_image.nii", "b/case_0001_image.nii"),
        ("a/case_0001_mask.nii", "b/case_0001_mask.nii"),
        ("a.json", "b.json"),
        ("a.ilpt", "b.ilpt"),
        ("a-study.json", "b-study.json"),
        ("a-study.csv", "b-study.csv"),
    ] {
        assert_eq!(std::fs::read(d.join(x)).unwrap(), std::fs::read(d.join(y)).unwrap(), "{x} vs {y}");
    }
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["phantom", "--out-dir", "ph", "--count", "1"]);

    // usage and configuration
    assert_eq!(code(d, &["no-such-command"]), 2);
    assert_eq!(code(d, &["build-ilp", "--image", "ph/case_0000_image.nii", "--out", "x.json"]), 2);
    assert_eq!(code(d, &["--set", "ilp.bin_width=-1", "build-ilp", "--manifest", "ph/manifest.json", "--out", "x.json"]), 2);
    assert_eq!(code(d, &["--set", "bogus.key=1", "diffuse", "--image", "ph/case_0000_image.nii", "--out", "x.nii"]), 2);

    // data
    assert_eq!(code(d, &["diffuse", "--image", "missing.nii", "--out", "x.nii"]), 3);
    std::fs::write(d.join("junk.nii"), b"not an image").unwrap();
    assert_eq!(code(d, &["diffuse", "--image", "junk.nii", "--out", "x.nii"]), 3);
    let no_lesion = ilpforge(d, &[
        "--set", "ilp.label=7", "build-ilp", "--image", "ph/case_0000_image.nii", "--mask", "ph/case_0000_mask.nii", "--out", "x.json",
    ]);
    assert_eq!(no_lesion.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&no_lesion.stderr).contains("case_0000_mask.nii"));

    // numeric: identical prediction sets give a zero-variance t-test
    ok(d, &["phantom", "--out-dir", "ph2", "--count", "2"]);
    let args = [
        "eval-seg", "--pred", "ph2/case_0000_mask.nii", "--pred", "ph2/case_0001_mask.nii", "--gt", "ph2/case_0000_mask.nii", "--gt",
        "ph2/case_0001_mask.nii", "--baseline", "ph2/case_0000_mask.nii", "--baseline", "ph2/case_0001_mask.nii",
    ];
    assert_eq!(code(d, &args), 4);
}
