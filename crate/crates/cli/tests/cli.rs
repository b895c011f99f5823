use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dpclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpclip")).args(args).output().unwrap()
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

#[test]
fn bench_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, json) = (dir.path().join("bench.csv"), dir.path().join("bench.json"));
    let out = dpclip(&[
        "bench",
        "--model",
        "mlp",
        "--methods",
        "reweight,nxbp",
        "--batch-sizes",
        "8,16",
        "--epochs",
        "2",
        "--records",
        "64",
        "--threads",
        "1",
        "--out",
        path_arg(&csv),
        "--json",
        path_arg(&json),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,method,batch,depth,epoch_seconds_median,speedup_vs_nxbp,final_accuracy,thread_count,status"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!((r[0], r[3], r[7], r[8]), ("mlp", "2", "1", "ok"));
        assert!(r[4].parse::<f64>().unwrap() > 0.0);
        if r[1] == "nxbp" {
            assert_eq!(r[5].parse::<f64>().unwrap(), 1.0);
        }
    }
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 4);
}

#[test]
fn train_reports_metrics_and_privacy() {
    let dir = tempfile::tempdir().unwrap();
    let (metrics, report) = (dir.path().join("m.csv"), dir.path().join("eps.json"));
    let out = dpclip(&[
        "train",
        "--model",
        "mlp",
        "--data-kind",
        "separable",
        "--records",
        "200",
        "--epochs",
        "3",
        "--batch-size",
        "20",
        "--sigma",
        "0.5",
        "--noise-scale",
        "clip-multiplier",
        "--metrics",
        path_arg(&metrics),
        "--eps-report",
        path_arg(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("final train accuracy"));
    let text = fs::read_to_string(&metrics).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,wall_seconds,loss,accuracy,eps_prime");
    assert_eq!(text.lines().count(), 4);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["steps"], 30);
    assert!(r["eps_prime"].as_f64().unwrap().is_finite());
}

#[test]
fn train_on_idx_fixture() {
    let out = dpclip(&[
        "train",
        "--model",
        "cnn",
        "--epochs",
        "1",
        "--batch-size",
        "2",
        "--idx-images",
        path_arg(&fixture("two-images.idx.gz")),
        "--idx-labels",
        path_arg(&fixture("two-labels.idx")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn corrupt_idx_fails_cleanly() {
    let out = dpclip(&[
        "train",
        "--model",
        "mlp",
        "--epochs",
        "1",
        "--batch-size",
        "2",
        "--idx-images",
        path_arg(&fixture("truncated-images.idx")),
        "--idx-labels",
        path_arg(&fixture("two-labels.idx")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("format error at byte 900"), "{err}");
}

#[test]
fn usage_errors_exit_non_zero() {
    let out = dpclip(&["train", "--model", "transformer", "--data-kind", "separable"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tokens"));
    let out = dpclip(&["bench", "--model", "mlp", "--epochs", "1", "--warmup", "1"]);
    assert!(!out.status.success());
    let out = dpclip(&["train", "--model", "perceptron"]);
    assert!(!out.status.success());
}
