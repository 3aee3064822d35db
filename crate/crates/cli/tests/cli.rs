use std::path::Path;
use std::process::{Command, Output};

fn nsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nsd(args);
    assert!(
        out.status.success(),
        "nsd {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth",
        "--out",
        p(dir),
        "--seed",
        "3",
        "--train-size",
        "400",
        "--val-size",
        "80",
        "--test-size",
        "80",
    ]);
}

#[test]
fn version_lists_formats() {
    let v = ok(&["--version"]);
    assert!(v.contains("NSDM format 1"), "{v}");
    assert!(v.contains("NSDE format 1"), "{v}");
    assert!(v.contains("report format 1"), "{v}");
}

#[test]
fn stats_prints_json() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let corpus = tmp.path();
    let by_dir: serde_json::Value =
        serde_json::from_str(&ok(&["stats", "--corpus", p(corpus)])).unwrap();
    let by_files: serde_json::Value = serde_json::from_str(&ok(&[
        "stats",
        "--train",
        p(&corpus.join("train.conll")),
        "--val",
        p(&corpus.join("valid.conll")),
        "--test",
        p(&corpus.join("test.conll")),
    ]))
    .unwrap();
    assert_eq!(by_dir, by_files);
    assert!(by_dir.get("oov_word_percentage").is_some(), "{by_dir}");
}

#[test]
fn pipeline_build_train_detect_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let bench = tmp.path().join("bench");
    synth(&corpus);
    ok(&[
        "build",
        "--corpus",
        p(&corpus),
        "--proportion",
        "0.15",
        "--strategy",
        "remove",
        "--seed",
        "1",
        "--out",
        p(&bench),
    ]);
    for f in ["train.conll", "val.conll", "test.conll", "benchmark.json"] {
        assert!(bench.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(bench.join("benchmark.json")).unwrap()).unwrap();
    assert!(!manifest["unknown_types"].as_array().unwrap().is_empty());

    let refused = nsd(&[
        "build",
        "--corpus",
        p(&corpus),
        "--seed",
        "1",
        "--out",
        p(&bench),
    ]);
    assert!(
        !refused.status.success(),
        "overwrite without --force must fail"
    );

    for obj in ["multiple", "binary"] {
        ok(&[
            "train",
            "--benchmark",
            p(&bench),
            "--objective",
            obj,
            "--features",
            "hashed:d=256",
            "--max-epochs",
            "3",
        ]);
        assert!(bench.join(format!("model-{obj}.nsdm")).is_file());
    }

    ok(&[
        "detect",
        "--benchmark",
        p(&bench),
        "--method",
        "gda",
        "--objective",
        "multiple",
        "--distance",
        "minimum",
        "--calibrate",
    ]);
    let det: serde_json::Value =
        serde_json::from_slice(&std::fs::read(bench.join("detector.json")).unwrap()).unwrap();
    assert_eq!(det["config"]["method"], "gda");
    assert!(
        det["calibration"]["calibration"]["curve"]
            .as_array()
            .unwrap()
            .len()
            > 1
    );

    let preds = bench.join("predictions.txt");
    let first = std::fs::read_to_string(&preds).unwrap();
    let line = first.lines().next().unwrap();
    assert_eq!(line.split_whitespace().count(), 3, "{line}");

    let out = ok(&["eval", "--pred", p(&preds), "--json"]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    let f1 = report["nsd_token"]["f1"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&f1));

    let with_gold = ok(&[
        "eval",
        "--pred",
        p(&preds),
        "--gold",
        p(&bench.join("test.conll")),
        "--json",
    ]);
    assert_eq!(
        report,
        serde_json::from_str::<serde_json::Value>(&with_gold).unwrap()
    );

    let table = ok(&["analyze", "--pred", p(&preds)]);
    assert!(table.contains("Prediction is NS"), "{table}");

    let out2 = tmp.path().join("msp");
    ok(&[
        "detect",
        "--benchmark",
        p(&bench),
        "--method",
        "msp",
        "--objective",
        "binary+multiple",
        "--threshold",
        "0.9",
        "--binary-threshold",
        "0.7",
        "--out",
        p(&out2),
    ]);
    let det: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out2.join("detector.json")).unwrap()).unwrap();
    assert_eq!(det["config"]["threshold"], 0.9);
    assert_eq!(det["config"]["binary_threshold"], 0.7);
}

#[test]
fn detect_without_model_explains() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let bench = tmp.path().join("bench");
    synth(&corpus);
    ok(&["build", "--corpus", p(&corpus), "--out", p(&bench)]);
    let out = nsd(&[
        "detect",
        "--benchmark",
        p(&bench),
        "--method",
        "msp",
        "--objective",
        "multiple",
        "--threshold",
        "0.5",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nsd train"));
}

#[test]
fn invalid_detector_rejected() {
    let out = nsd(&[
        "run",
        "--synthetic",
        "1",
        "--detectors",
        "gda:binary+multiple:minimum",
    ]);
    assert!(!out.status.success());
}

#[test]
fn run_writes_reports_and_refuses_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"corpus": {"synthetic": {"train": 300, "val": 60, "test": 60, "seed": 5}},
            "strategies": ["remove"], "seeds": [1, 2],
            "features": {"kind": "hashed", "dimension": 128},
            "train": {"max_epochs": 2}}"#,
    )
    .unwrap();
    let args = [
        "run",
        "--config",
        p(&cfg),
        "--detectors",
        "msp:multiple",
        "--out",
        p(&out),
        "--sequential",
    ];
    ok(&args);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
    assert_eq!(report["config"]["detectors"][0], "msp:multiple");
    assert_eq!(report["config"]["parallelism"], "sequential");
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("selection,strategy,detector,metric"));
    assert!(!nsd(&args).status.success());
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&forced);
}
