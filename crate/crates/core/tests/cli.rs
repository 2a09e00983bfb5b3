use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lel::cli::{EXIT_CONTRACT, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn lel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lel"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert_eq!(
        out.status.code(),
        Some(EXIT_OK),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_spec(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("spec.cfg");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = "n_channels = 4\nn_samples = 200\ntrials_per_class = 12\n";

#[test]
fn small_pipeline_through_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let spec = write_spec(d, SMALL);
    let stdout = ok(&lel(&[
        "synth",
        "--config",
        p(&spec),
        "--out",
        p(&d.join("data")),
        "--stream-samples",
        "1000",
        "--stream-class",
        "1",
    ]));
    assert!(stdout.contains("oracle accuracy"));
    let data = d.join("data/dataset.leld");
    let before = fs::read(&data).unwrap();

    ok(&lel(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&d.join("ckpt")),
        "--epochs",
        "3",
        "--batch-size",
        "32",
    ]));
    for f in [
        "weights.leld",
        "manifest.tsv",
        "model.cfg",
        "train.cfg",
        "metrics.json",
        "report.jsonl",
        "run.cfg",
    ] {
        assert!(d.join("ckpt").join(f).exists(), "missing {f}");
    }
    let report = fs::read_to_string(d.join("ckpt/report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 3);
    let rec: serde_json::Value = serde_json::from_str(report.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val_acc", "val_f1", "w"] {
        assert!(rec.get(key).is_some(), "report lacks {key}");
    }

    let ckpt = d.join("ckpt");
    ok(&lel(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&d.join("eval")),
    ]));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/eval.json")).unwrap()).unwrap();
    let acc = eval["fused"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let v = lel(&[
        "verify",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&d.join("verify")),
    ]);
    let stdout = ok(&v);
    assert!(stdout.contains("verification passed"));
    let lines = fs::read_to_string(d.join("verify/verify.jsonl")).unwrap();
    for line in lines.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        if rec["kind"] == "weight" && !rec["bound"].is_null() {
            assert!(rec["sigma"].as_f64().unwrap() <= rec["bound"].as_f64().unwrap() * (1.0 + 1e-6));
        }
    }

    ok(&lel(&[
        "stream",
        "--checkpoint",
        p(&ckpt),
        "--recording",
        p(&d.join("data/recording.leld")),
        "--window",
        "200",
        "--stride",
        "200",
        "--out",
        p(&d.join("stream")),
    ]));
    assert_eq!(
        fs::read_to_string(d.join("stream/stream.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    assert!(d.join("stream/latency.json").exists());

    for kind in ["roc", "connectivity", "fusion_weights"] {
        ok(&lel(&[
            "export",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&data),
            "--kind",
            kind,
            "--out",
            p(&d.join("export")),
        ]));
    }
    let w: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("export/fusion_weights.json")).unwrap()).unwrap();
    let sum: f64 = w["weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((sum - 1.0).abs() < 1e-12);
    let conn = fs::read_to_string(d.join("export/connectivity_class0.tsv")).unwrap();
    let m: Vec<Vec<f64>> = conn
        .lines()
        .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
        .collect();
    for (i, row) in m.iter().enumerate() {
        assert_eq!(row[i], 1.0);
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, m[j][i]);
        }
    }
    let bad = lel(&[
        "export",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--kind",
        "chord",
        "--out",
        p(&d.join("x")),
    ]);
    assert_eq!(bad.status.code(), Some(EXIT_USAGE));

    // inputs are never modified
    assert_eq!(fs::read(&data).unwrap(), before);
}

#[test]
fn synth_is_byte_reproducible_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let spec = write_spec(d, SMALL);
    ok(&lel(&[
        "synth",
        "--config",
        p(&spec),
        "--seed",
        "5",
        "--out",
        p(&d.join("a")),
    ]));
    ok(&lel(&[
        "synth",
        "--config",
        p(&spec),
        "--seed",
        "5",
        "--out",
        p(&d.join("b")),
    ]));
    assert_eq!(
        fs::read(d.join("a/dataset.leld")).unwrap(),
        fs::read(d.join("b/dataset.leld")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("a/run.cfg")).unwrap(),
        fs::read(d.join("b/run.cfg")).unwrap()
    );

    let bad = write_spec(d, "n_classes = 11\nn_channels = 2\n");
    let out = lel(&["synth", "--config", p(&bad), "--out", p(&d.join("c"))]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exhausted"));

    let unknown = write_spec(d, "n_chanels = 2\n");
    assert_eq!(
        lel(&["synth", "--config", p(&unknown), "--out", p(&d.join("c"))])
            .status
            .code(),
        Some(EXIT_USAGE)
    );
}

#[test]
fn mismatched_checkpoint_is_a_contract_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let spec = write_spec(d, SMALL);
    ok(&lel(&["synth", "--config", p(&spec), "--out", p(&d.join("a"))]));
    let other = d.join("other.cfg");
    fs::write(&other, "n_channels = 3\nn_samples = 200\ntrials_per_class = 12\n").unwrap();
    ok(&lel(&["synth", "--config", p(&other), "--out", p(&d.join("b"))]));
    ok(&lel(&[
        "train",
        "--data",
        p(&d.join("a/dataset.leld")),
        "--out",
        p(&d.join("ckpt")),
        "--epochs",
        "1",
    ]));
    let out = lel(&[
        "eval",
        "--checkpoint",
        p(&d.join("ckpt")),
        "--data",
        p(&d.join("b/dataset.leld")),
        "--out",
        p(&d.join("e")),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_CONTRACT));
    let help = String::from_utf8_lossy(&lel(&["--help"]).stdout).into_owned();
    assert!(help.contains("Exit codes"));
}

#[test]
fn echoed_config_reproduces_training() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let spec = write_spec(d, SMALL);
    ok(&lel(&["synth", "--config", p(&spec), "--out", p(&d.join("data"))]));
    let data = d.join("data/dataset.leld");
    ok(&lel(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&d.join("a")),
        "--epochs",
        "2",
        "--seed",
        "3",
    ]));
    ok(&lel(&[
        "train",
        "--config",
        p(&d.join("a/run.cfg")),
        "--out",
        p(&d.join("b")),
    ]));
    assert_eq!(
        fs::read(d.join("a/weights.leld")).unwrap(),
        fs::read(d.join("b/weights.leld")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(d.join("a/report.jsonl")).unwrap(),
        fs::read_to_string(d.join("b/report.jsonl")).unwrap()
    );
}

#[test]
fn default_synthetic_training_reaches_target_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&lel(&["synth", "--out", p(&d.join("data"))]));
    let data = d.join("data/dataset.leld");
    ok(&lel(&["train", "--data", p(&data), "--out", p(&d.join("ckpt"))]));
    ok(&lel(&[
        "eval",
        "--checkpoint",
        p(&d.join("ckpt")),
        "--data",
        p(&data),
        "--out",
        p(&d.join("eval")),
    ]));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/eval.json")).unwrap()).unwrap();
    assert!(eval["fused"]["accuracy"].as_f64().unwrap() >= 0.95);
    let v = lel(&[
        "verify",
        "--checkpoint",
        p(&d.join("ckpt")),
        "--out",
        p(&d.join("verify")),
    ]);
    assert_eq!(v.status.code(), Some(EXIT_OK));
}
