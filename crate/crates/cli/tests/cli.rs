use std::path::Path;
use std::process::{Command, Output};

fn hgit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hgit(args);
    assert!(
        out.status.success(),
        "hgit {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn stage_by_stage_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--preset",
        "shifted-bright",
        "--n-train",
        "8",
        "--n-test",
        "4",
        "--size",
        "32",
        "--seed",
        "1",
    ]);
    for split in ["source-train", "source-test", "target-train", "target-test"] {
        assert!(data.join(split).join("manifest.json").exists());
    }
    assert!(data.join("style.json").exists());

    let src = data.join("source-train/manifest.json");
    let tgt = data.join("target-train/manifest.json");
    let translated = tmp.path().join("translated");
    ok(&[
        "translate",
        "--backend",
        "hist-match",
        "--source",
        p(&src),
        "--target",
        p(&tgt),
        "--out",
        p(&translated),
    ]);

    let gated = tmp.path().join("gated");
    let stdout = ok(&[
        "gate",
        "--transformed",
        p(&translated.join("manifest.json")),
        "--target",
        p(&tgt),
        "--keep-percent",
        "70",
        "--out",
        p(&gated),
    ]);
    assert!(stdout.starts_with("kept 6 of 8"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(gated.join("curation_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 8);
    assert!(gated.join("curation_report.csv").exists());

    let ckpt = tmp.path().join("seg.bin");
    ok(&[
        "train-seg",
        "--data",
        p(&gated.join("manifest.json")),
        "--out",
        p(&ckpt),
        "--epochs",
        "2",
        "--width",
        "4",
        "--seed",
        "3",
    ]);
    let preds = tmp.path().join("preds");
    let test = data.join("target-test/manifest.json");
    ok(&[
        "predict",
        "--data",
        p(&test),
        "--model",
        p(&ckpt),
        "--out",
        p(&preds),
        "--threshold",
        "0.5",
    ]);
    let results = tmp.path().join("results.json");
    ok(&[
        "eval",
        "--pred",
        p(&preds),
        "--truth",
        p(&test),
        "--out",
        p(&results),
        "--scenario",
        "hist-match",
    ]);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&results).unwrap()).unwrap();
    let (sa, iou) = (r["sa"].as_f64().unwrap(), r["iou"].as_f64().unwrap());
    assert!((0.0..=1.0).contains(&sa) && iou <= sa);
    assert_eq!(r["scenario"], "hist-match");
}

#[test]
fn translation_refuses_the_test_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--preset",
        "textured",
        "--n-train",
        "2",
        "--n-test",
        "2",
        "--size",
        "32",
    ]);
    let out = hgit(&[
        "translate",
        "--backend",
        "fda",
        "--source",
        p(&data.join("source-train/manifest.json")),
        "--target",
        p(&data.join("target-test/manifest.json")),
        "--out",
        p(&tmp.path().join("t")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("test split"));
}

#[test]
fn experiment_from_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("exp");
    let config = tmp.path().join("experiment.json");
    let text = format!(
        r#"{{
            "scenarios": ["source-only", "hist-match"],
            "datasets": [{{"name": "bright", "target_style": "shifted-bright", "n_train": 4, "n_test": 2, "image_size": 32}}],
            "seeds": [0],
            "segmentation": {{"epochs": 1, "arch": {{"base_channels": 4}}}},
            "out_dir": {:?}
        }}"#,
        p(&out_dir)
    );
    std::fs::write(&config, text).unwrap();
    let stdout = ok(&["run-experiment", "--config", p(&config)]);
    assert!(stdout.starts_with("scenario,bright_sa,bright_iou,averaged_sa,averaged_iou"));
    assert_eq!(stdout.lines().count(), 3);
    let again = ok(&["run-experiment", "--config", p(&config), "--resume"]);
    assert_eq!(stdout, again);
    assert!(out_dir.join("plots/bright.png").exists());
}

#[test]
fn init_config_writes_a_runnable_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("desk.json");
    ok(&["init-config", "--out-dir", "runs", "--path", p(&path)]);
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(cfg["seeds"].as_array().unwrap().len(), 3);
    assert_eq!(cfg["datasets"][0]["image_size"], 64);
}
