use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cst")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke() -> String {
    configs().join("smoke.toml").display().to_string()
}

fn train_smoke(out: &Path, extra: &[&str]) -> Output {
    let cfg = smoke();
    let mut args = vec!["train", "--config", &cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = cst(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

#[test]
fn smoke_run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_smoke(dir.path(), &[]);
    let text = stdout(&o);
    assert!(text.contains("Val Acc(%)"));
    assert!(text.contains("Train-Cost Savings"));
    for f in ["manifest.json", "metrics.jsonl", "checkpoint.json", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["eval_accuracy"].as_f64().unwrap() > 0.9);
    let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    for line in lines.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(r["s_sum"].as_f64().unwrap() <= r["budget"].as_f64().unwrap() + 1e-9);
    }
}

#[test]
fn missing_remain_ratio_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(configs().join("smoke.toml")).unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text.replace("remain_ratio = 0.5\n", "")).unwrap();
    let o = cst(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("remain_ratio"), "{}", stderr(&o));
}

#[test]
fn out_of_range_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = cst(&["train", "--config", &smoke(), "--override", "train.remain_ratio=1.5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("remain_ratio"));
}

#[test]
fn same_seed_gives_identical_metrics_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_smoke(a.path(), &["--seed", "4"]);
    train_smoke(b.path(), &["--seed", "4"]);
    let ma = fs::read(a.path().join("metrics.jsonl")).unwrap();
    let mb = fs::read(b.path().join("metrics.jsonl")).unwrap();
    assert!(!ma.is_empty());
    assert_eq!(ma, mb);
}

#[test]
fn resume_reproduces_uninterrupted_metrics() {
    let full = tempfile::tempdir().unwrap();
    let part = tempfile::tempdir().unwrap();
    train_smoke(full.path(), &[]);
    train_smoke(part.path(), &["--override", "train.epochs=2"]);
    let ck = part.path().join("checkpoint.json");
    train_smoke(part.path(), &["--resume", ck.to_str().unwrap()]);
    assert_eq!(
        fs::read(full.path().join("metrics.jsonl")).unwrap(),
        fs::read(part.path().join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn eval_reproduces_training_report() {
    let dir = tempfile::tempdir().unwrap();
    train_smoke(dir.path(), &[]);
    let ck = dir.path().join("checkpoint.json");
    let ev = dir.path().join("ev");
    let o = cst(&["eval", "--config", &smoke(), "--checkpoint", ck.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("report.json")).unwrap();
    let evaluated = fs::read_to_string(ev.join("eval.json")).unwrap();
    let a: serde_json::Value = serde_json::from_str(&report).unwrap();
    let b: serde_json::Value = serde_json::from_str(&evaluated).unwrap();
    let b = b.as_object().unwrap();
    assert!(b.contains_key("mask") && b.contains_key("candidates"));
    for (key, value) in b {
        assert_eq!(&a[key], value, "{key}");
    }
}

#[test]
fn eval_lists_every_sampled_mask_and_marks_the_best() {
    let dir = tempfile::tempdir().unwrap();
    train_smoke(dir.path(), &[]);
    let ck = dir.path().join("checkpoint.json");
    let o = cst(&["eval", "--config", &smoke(), "--checkpoint", ck.to_str().unwrap(), "--eval-samples", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| l.trim_start().chars().next().is_some_and(|c| c.is_ascii_digit() || c == '*'))
        .filter(|l| l.split_whitespace().count() == 5 || l.contains('*'))
        .collect();
    assert!(rows.len() >= 5, "{text}");
    assert_eq!(text.matches('*').count(), 1, "{text}");
}

#[test]
fn corrupted_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    train_smoke(dir.path(), &[]);
    let ck = dir.path().join("checkpoint.json");
    let bytes = fs::read(&ck).unwrap();
    fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let o = cst(&["eval", "--config", &smoke(), "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert!(err.contains("checkpoint"), "{err}");
    assert!(!err.contains("panicked"), "{err}");
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    train_smoke(dir.path(), &[]);
    let ck = dir.path().join("checkpoint.json");
    let o = cst(&[
        "eval", "--config", &smoke(), "--override", "model.layers=[{type=\"dense\",units=8},{type=\"relu\"}]",
        "--checkpoint", ck.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(!stderr(&o).contains("panicked"));
}

#[test]
fn out_root_environment_variable_is_honored() {
    let root = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cst"))
        .args(["train", "--config", &smoke()])
        .env("CST_OUT_ROOT", root.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(root.path()).unwrap().collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].as_ref().unwrap().path().join("report.json").exists());
}

#[test]
fn project_check_edge_cases() {
    let o = cst(&["project-check", "--trials", "1000", "--dim", "50"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("failures (> 1e-6): 0"), "{}", stdout(&o));
    let o = cst(&["project-check", "--trials", "200", "--dim", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let o = cst(&["project-check", "--trials", "200", "--dim", "20", "--budget-ratio", "1.0"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn diagnose_toy_config_reports_exact_moments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("toy_diagnose.toml");
    let o = cst(&["diagnose", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("exact enumeration"));
    for key in ["V_hat", "Vmax_hat", "EL2_hat", "variance ratio"] {
        assert!(text.contains(key), "{key}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("diagnose.json")).unwrap()).unwrap();
    assert!(report["residual_vr"].as_f64().unwrap() <= 1e-9);
    assert!(report["variance_ratio"].as_f64().unwrap() >= 10.0);
}

#[test]
fn diagnose_rejects_wrong_structure_length() {
    let cfg = configs().join("toy_diagnose.toml");
    let o = cst(&["diagnose", "--config", cfg.to_str().unwrap(), "--override", "diagnose.s=[0.5, 0.5]"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
