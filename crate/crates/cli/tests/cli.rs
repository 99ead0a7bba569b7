//! End-to-end tests for the `segclass` binary: every subcommand runs against
//! a small synthetic dataset and the artifacts it writes are checked.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_segclass"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn segclass");
    assert!(
        out.status.success(),
        "segclass {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A tiny synthetic-shapes run configuration; `epochs` is kept minimal so
/// each test finishes in seconds.
fn write_config(dir: &Path, method: &str, num_classes: usize, size: usize) -> String {
    let path = dir.join(format!("{method}.json"));
    let cfg = serde_json::json!({
        "dataset": {
            "name": "synthetic-shapes",
            "num_classes": num_classes,
            "image_shape": [16, 16, 1],
            "size": size,
            "source": "synthetic-shapes"
        },
        "method": method,
        "network": { "backbone": "wide-resnet", "depth": 10, "width": 1, "dropout": 0.0 },
        "train": { "epochs": 1, "batch_size": 4, "lr": 0.01, "eval_every": 1 },
        "subset": { "perclass": 2 },
        "seed": 7,
        "binarize_threshold": 0.5
    });
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn prepare_labels_writes_loadable_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cvs", 3, 9);
    let out = tmp.path().join("labels");
    run_ok(&[
        "prepare-labels",
        "--config",
        &cfg,
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(out.join("manifest.tsv").exists());
    assert!(out.join("config.resolved.json").exists());

    // the manifest must round-trip through the dataset loader
    let spec = segclass::DatasetSpec {
        name: "labelled".into(),
        num_classes: 3,
        image_shape: (16, 16, 1),
        size: 9,
        source: out.join("manifest.tsv").to_string_lossy().into_owned(),
    };
    let ds = segclass::load_dataset(&spec).unwrap();
    assert_eq!(ds.len(), 9);
    for s in ds.samples() {
        let mask = s.mask.as_ref().expect("every sample carries a mask");
        assert!(mask.values.iter().all(|&v| v == 0 || v == s.label as u8));
    }
}

#[test]
fn train_then_evaluate_produces_reports() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "classification", 3, 9);
    let out = tmp.path().join("run");
    run_ok(&[
        "train",
        "--config",
        &cfg,
        "--out-dir",
        out.to_str().unwrap(),
    ]);

    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["format"], "segclass-run-v1");
    assert_eq!(resolved["config_hash"].as_str().unwrap().len(), 64);

    let metrics = std::fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert!(metrics.starts_with("epoch\tsplit\tmetric\tvalue\n"));
    assert!(metrics.contains("train\tloss"));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let acc = report["report"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // evaluate the saved checkpoint separately
    let eval_out = tmp.path().join("eval");
    run_ok(&[
        "evaluate",
        "--config",
        &cfg,
        "--out-dir",
        eval_out.to_str().unwrap(),
        "--model",
        out.join("checkpoint").to_str().unwrap(),
    ]);
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("report.json")).unwrap())
            .unwrap();
    // subset is 2 per class over 3 classes
    assert_eq!(eval["report"]["n_class_labeled"], 6);
    assert_eq!(
        eval["report"]["accuracy"].as_f64().unwrap(),
        acc,
        "re-evaluating the same checkpoint must reproduce the accuracy"
    );
}

#[test]
fn train_seg_then_propagate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "segmentation-only", 3, 9);
    let seg_out = tmp.path().join("seg");
    run_ok(&[
        "train-seg",
        "--config",
        &cfg,
        "--out-dir",
        seg_out.to_str().unwrap(),
        "--m",
        "2",
    ]);
    let ids = std::fs::read_to_string(seg_out.join("train_ids.txt")).unwrap();
    assert_eq!(ids.trim().lines().count(), 6, "2 ids per class, 3 classes");

    let prop_out = tmp.path().join("prop");
    run_ok(&[
        "propagate",
        "--config",
        &cfg,
        "--out-dir",
        prop_out.to_str().unwrap(),
        "--model",
        seg_out.join("checkpoint").to_str().unwrap(),
    ]);
    let summary = std::fs::read_to_string(prop_out.join("propagation.txt")).unwrap();
    assert!(summary.contains("total=9"), "summary was: {summary}");
    assert!(prop_out.join("manifest.tsv").exists());
}

#[test]
fn grid_writes_results_and_means() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cvs", 3, 9);
    let out = tmp.path().join("grid");
    run_ok(&[
        "grid",
        "--config",
        &cfg,
        "--out-dir",
        out.to_str().unwrap(),
        "--methods",
        "cvs,classification",
        "--sizes",
        "2",
        "--seeds",
        "1,2",
    ]);
    let results = std::fs::read_to_string(out.join("results.tsv")).unwrap();
    assert!(results.starts_with("method\tper_class\tseed\taccuracy\n"));
    assert_eq!(results.trim().lines().count(), 1 + 2 * 2, "header + 4 cells");

    let means = std::fs::read_to_string(out.join("means.tsv")).unwrap();
    assert!(means.starts_with("method\tper_class\tmean_accuracy\n"));
    assert_eq!(means.trim().lines().count(), 3, "header + one row per method");

    // feed the results straight into cost-report
    let cost_out = tmp.path().join("cost");
    run_ok(&[
        "cost-report",
        "--config",
        &cfg,
        "--out-dir",
        cost_out.to_str().unwrap(),
        "--results",
        out.join("results.tsv").to_str().unwrap(),
    ]);
    let curve = std::fs::read_to_string(cost_out.join("cost_curve.tsv")).unwrap();
    assert!(curve.starts_with("method\tseconds\taccuracy\tcompute_marker\n"));
    let mut last = f64::NEG_INFINITY;
    for line in curve.lines().skip(1) {
        let secs: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(secs >= last, "curve must be sorted by seconds");
        last = secs;
    }
}

#[test]
fn bad_config_exits_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{\"no_such_field\": 1}").unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            tmp.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn bad_usage_exits_two() {
    let out = bin().args(["no-such-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn locked_out_dir_is_refused() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cvs", 3, 9);
    let out = tmp.path().join("busy");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), "").unwrap();
    let res = bin()
        .args([
            "prepare-labels",
            "--config",
            &cfg,
            "--out-dir",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("lock"));
}

#[test]
fn relative_out_dir_resolves_against_env_root() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "cvs", 3, 9);
    run_ok_with_root(tmp.path(), &["prepare-labels", "--config", &cfg, "--out-dir", "rel"]);
    assert!(tmp.path().join("rel").join("manifest.tsv").exists());
}

fn run_ok_with_root(root: &Path, args: &[&str]) {
    let out = bin()
        .env("SEGCLASS_OUTPUT_ROOT", root)
        .args(args)
        .output()
        .expect("spawn segclass");
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
