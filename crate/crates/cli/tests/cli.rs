use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdadmm::graph::{save_dataset, Graph};
use pdadmm::synthetic::blobs;

fn pdadmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdadmm")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Well separated blobs: a linear model fits the training split exactly.
fn fixture(dir: &Path) -> PathBuf {
    let path = dir.join("data");
    save_dataset(&blobs(40, 3, 4, 12.0, 2).unwrap(), &path).unwrap();
    path
}

fn config(dir: &Path, dataset: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.json");
    let json = format!(
        r#"{{"dataset":{:?},"layers":3,"neurons":8,"hops":2,"rho":1.0,"nu":0.1,"epochs":5,"seed":1{extra}}}"#,
        dataset.to_str().unwrap()
    );
    fs::write(&path, json).unwrap();
    path
}

fn train(cfg: &Path, output: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--output", output.to_str().unwrap()];
    args.extend_from_slice(extra);
    pdadmm(&args)
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &fixture(dir.path()), "");
    let out = dir.path().join("out");
    let run = train(&cfg, &out, &[]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0], "epoch,lagrangian,risk,max_residual,mean_residual,ck,train_acc,test_acc,epoch_ms,bytes_sent");
    assert!(lines[1].starts_with("1,"));
    assert!(out.join("checkpoint.bin").is_file());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["epochs"], 5);
    assert_eq!(manifest["epochs_completed"], 5);
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["inputs"]["dataset/edges.tsv"].is_string());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &fixture(dir.path()), r#","workers":3"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(&cfg, &a, &[])), 0);
    assert_eq!(code(&train(&cfg, &b, &[])), 0);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
}

#[test]
fn flags_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &fixture(dir.path()), "");
    let out = dir.path().join("out");
    assert_eq!(code(&train(&cfg, &out, &["--epochs", "3", "--mode", "pdadmm-q", "--quant-lo", "-2"])), 0);
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 4);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["mode"], "pdadmm-q");
    assert_eq!(manifest["config"]["quant_lo"], -2.0);
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &dir.path().join("missing"), "");
    assert_eq!(code(&train(&cfg, &dir.path().join("out"), &[])), 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&train(&bad, &dir.path().join("out"), &[])), 2);

    let cfg = config(dir.path(), &fixture(dir.path()), r#","workers":4"#);
    assert_eq!(code(&train(&cfg, &dir.path().join("out"), &[])), 2);
}

#[test]
fn solver_abort_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut g: Graph = blobs(20, 2, 3, 4.0, 3).unwrap();
    g.features.mapv_inplace(|v| v * 1e9);
    let data = dir.path().join("huge");
    save_dataset(&g, &data).unwrap();
    let cfg = config(dir.path(), &data, "");
    let out = dir.path().join("out");
    let run = train(&cfg, &out, &["--nu", "1"]);
    assert_eq!(code(&run), 3, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stderr).contains("ceiling"));
}

#[test]
fn eval_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let cfg = config(dir.path(), &data, "");
    let out = dir.path().join("out");
    assert_eq!(code(&train(&cfg, &out, &["--epochs", "150"])), 0);
    let ckpt = out.join("checkpoint.bin");
    let args = ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", data.to_str().unwrap()];
    let first = pdadmm(&args);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let text = String::from_utf8(first.stdout.clone()).unwrap();
    assert!(text.starts_with("train_acc 1.00\ntest_acc "), "{text}");
    assert_eq!(pdadmm(&args).stdout, first.stdout);
}

#[test]
fn eval_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let out = dir.path().join("out");
    assert_eq!(code(&train(&config(dir.path(), &data, ""), &out, &[])), 0);
    let ckpt = out.join("checkpoint.bin");

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    let broken = dir.path().join("broken.bin");
    fs::write(&broken, bytes).unwrap();
    let run = pdadmm(&["eval", "--checkpoint", broken.to_str().unwrap(), "--dataset", data.to_str().unwrap()]);
    assert_eq!(code(&run), 2);

    // 8 inputs do not split into 3-feature hops
    let other = dir.path().join("other");
    save_dataset(&blobs(30, 3, 3, 4.0, 5).unwrap(), &other).unwrap();
    let run = pdadmm(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", other.to_str().unwrap()]);
    assert_eq!(code(&run), 2);
}

#[test]
fn benchmark_prints_speedup_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &fixture(dir.path()), "");
    let run = pdadmm(&["benchmark", "--config", cfg.to_str().unwrap(), "--workers", "1", "--timed-epochs", "2"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = String::from_utf8(run.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "workers,layers,neurons,epoch_ms,speedup");

    let run = pdadmm(&["benchmark", "--config", cfg.to_str().unwrap(), "--workers", "1,2,3", "--timed-epochs", "2"]);
    assert_eq!(code(&run), 0);
    let text = String::from_utf8(run.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == 5 && r[3] > 0.0 && r[4] > 0.0));
    assert_eq!(rows.iter().map(|r| r[0] as usize).collect::<Vec<_>>(), vec![1, 2, 3]);

    let run = pdadmm(&["benchmark", "--config", cfg.to_str().unwrap(), "--workers", "1,4"]);
    assert_eq!(code(&run), 2);
}
