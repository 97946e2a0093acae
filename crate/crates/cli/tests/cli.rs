use std::path::Path;
use std::process::{Command, Output};

const MICRO: &str = r#"{
  "num_tasks": 2,
  "suite_seed": 4,
  "epochs_per_task": 2,
  "eval_every": 1,
  "batch": 8,
  "lr": 0.003,
  "eval_episodes": 2,
  "demos_per_task": 2,
  "cr_ratio": 1.0,
  "consolidation_epochs": 1,
  "pretrain": {"tasks": 2, "demos_per_task": 2, "epochs": 1, "batch": 8, "eval_episodes": 2},
  "policy": {"grid": 4, "context": 3, "d_model": 8, "layers": 1, "heads": 2, "mlp_hidden": 12,
             "film_hidden": 10, "head_hidden": 12, "modes": 2, "encoder_rank": 2, "rank": 2,
             "router_hidden": 8, "dropout": 0.0}
}"#;

fn peel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peel"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn peel")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(peel(&["train-everything"]).status.code(), Some(2));
    assert_eq!(peel(&["lifelong"]).status.code(), Some(2));
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"delta": 0}"#).unwrap();
    let out = peel(&["gen-suite", "--config", s(&cfg), "--out", s(&dir.path().join("suite"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta"));
}

#[test]
fn unknown_method_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = peel(&["lifelong", "--method", "ewc", "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn pretrain_lifelong_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.json");
    std::fs::write(&cfg, MICRO).unwrap();
    let base = dir.path().join("base.ckpt");
    let out = peel(&["pretrain", "--config", s(&cfg), "--out", s(&base), "--eval"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("zero-shot"));

    let mut runs = Vec::new();
    for method in ["dmpel", "seqft_lora"] {
        let run = dir.path().join(method);
        let out = peel(&[
            "lifelong", "--config", s(&cfg), "--method", method, "--seed", "3", "--base", s(&base), "--out", s(&run),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for f in ["config.json", "suite.json", "success_matrix.json", "metrics.csv", "coefficients.csv", "storage.json"] {
            assert!(run.join(f).is_file(), "missing {f}");
        }
        assert!(run.join("checkpoints/task1.ckpt").is_file());
        runs.push(run);
    }

    // a finished run directory is never reused
    let again = peel(&["lifelong", "--config", s(&cfg), "--base", s(&base), "--out", s(&runs[0])]);
    assert_eq!(again.status.code(), Some(1));

    let summary = dir.path().join("summary.csv");
    let out = peel(&["report", "--out", s(&summary), s(&runs[0]), s(&runs[1])]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&summary).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn gen_suite_writes_demos() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.json");
    std::fs::write(&cfg, MICRO).unwrap();
    let out_dir = dir.path().join("suite");
    let out = peel(&["gen-suite", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["suite.json", "pretrain_suite.json", "task1.bin", "task2.bin"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn verify_passes() {
    let out = peel(&["verify"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
