use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[model]
stage_channels = [4, 8]
blocks_per_stage = 1
reduction = 4

[train]
epochs = 2
batch_size = 8

[synthetic]
n_train = 32
n_test = 16
size = 8
bar_length = 6.0
"#;

fn csa(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csa"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_config(dir: &Path) -> String {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    "small.toml".into()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn help_and_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let help = csa(tmp.path(), &["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("compare"));
    assert_eq!(code(&csa(tmp.path(), &[])), 1);
    assert_eq!(code(&csa(tmp.path(), &["frobnicate"])), 1);
    assert_eq!(code(&csa(tmp.path(), &["train", "--out", "o", "--bogus"])), 1);
    assert_eq!(code(&csa(tmp.path(), &["train"])), 1, "--out is required");
    assert_eq!(code(&csa(tmp.path(), &["train", "--out", "o", "--variant", "resnet"])), 1);
    assert_eq!(code(&csa(tmp.path(), &["train", "--out", "o", "--milestones", "3,x"])), 1);
    assert_eq!(listing(tmp.path()), Vec::<String>::new());
}

#[test]
fn invalid_configuration_exits_with_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    for extra in [
        vec!["--lr", "-1"],
        vec!["--epochs", "0"],
        vec!["--epochs", "4", "--milestones", "5"],
        vec!["--dataset", "cifar"],
        vec!["--limit", "0"],
    ] {
        let mut args = vec!["train", "--config", &cfg, "--out", "o"];
        args.extend(extra.iter().copied());
        let out = csa(tmp.path(), &args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).starts_with("error:"));
    }
    fs::write(tmp.path().join("typo.toml"), "[train]\nlearnign_rate = 0.1\n").unwrap();
    let out = csa(tmp.path(), &["train", "--config", "typo.toml", "--out", "o"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("learnign_rate"), "{}", stderr(&out));
    assert_eq!(code(&csa(tmp.path(), &["train", "--config", "missing.toml", "--out", "o"])), 1);
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&csa(tmp.path(), &["eval", "--checkpoint", "nope"])), 2);
    fs::write(tmp.path().join("bad"), "not a checkpoint\n").unwrap();
    assert_eq!(code(&csa(tmp.path(), &["eval", "--checkpoint", "bad"])), 2);
    let out = csa(tmp.path(), &["train", "--dataset", "idx:no-such-dir", "--out", "o"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let cfg = small_config(tmp.path());
    let out = csa(tmp.path(), &["train", "--config", &cfg, "--lr", "1e250", "--out", "o"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite loss"), "{}", stderr(&out));
}

#[test]
fn train_eval_analyze_round_trip() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let out = csa(dir, &["train", "--config", &cfg, "--variant", "csa", "--out", "run"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(listing(&dir.join("run")), ["ckpt", "config.toml", "metrics.json", "timing.json"]);
    assert_eq!(listing(dir), ["run", "small.toml"], "nothing written outside --out");

    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["model"]["variant"], "csa");
    let test_err = metrics["final_test"]["top1_error"].as_f64().unwrap();

    // Eval reuses the data settings recorded in the checkpoint.
    let out = csa(dir, &["eval", "--checkpoint", "run", "--out", "ev"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(eval["test"]["top1_error"].as_f64().unwrap(), test_err);
    assert_eq!(eval["test"]["samples"], 16);
    let out = csa(dir, &["eval", "--checkpoint", "run/ckpt", "--limit", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("(4 samples)"));

    let out = csa(dir, &["analyze", "--checkpoint", "run", "--out", "an"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        listing(&dir.join("an")),
        ["config.toml", "descriptors_stage0.csv", "descriptors_stage1.csv"]
    );
    let csv = fs::read_to_string(dir.join("an/descriptors_stage1.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("rank,channel,x,z,I_l,q,q_raw,p,z_ema,q_ema,p_ema"));
    assert_eq!(lines.count(), 8);

    let out = csa(dir, &["analyze", "--checkpoint", "run", "--no-smoothing", "--out", "an2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.join("an2/descriptors_stage0.csv")).unwrap();
    assert!(csv.starts_with("rank,channel,x,z,I_l,q,q_raw,p\n"));
    assert_eq!(code(&csa(dir, &["analyze", "--checkpoint", "run", "--smoothing", "1.5", "--out", "an3"])), 1);
    assert_eq!(listing(dir), ["an", "an2", "ev", "run", "small.toml"]);
}

#[test]
fn config_echo_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir);
    let out = csa(dir, &["train", "--config", &cfg, "--variant", "se", "--seed", "3", "--lr", "0.02", "--out", "a"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echo = fs::read_to_string(dir.join("a/config.toml")).unwrap();
    assert!(echo.contains("lr = 0.02"), "{echo}");
    assert!(echo.contains("variant = \"se\""), "{echo}");
    let out = csa(dir, &["train", "--config", "a/config.toml", "--out", "b"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(dir.join("a/metrics.json")).unwrap(), fs::read(dir.join("b/metrics.json")).unwrap());
    assert_eq!(echo, fs::read_to_string(dir.join("b/config.toml")).unwrap());
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("c.toml"), format!("{SMALL}\n[model.extra]\n")).unwrap();
    assert_eq!(code(&csa(dir, &["train", "--config", "c.toml", "--out", "x"])), 1);

    let cfg = small_config(dir);
    let out = csa(dir, &["train", "--config", &cfg, "--batch", "4", "--milestones", "none", "--epochs", "1", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echo = fs::read_to_string(dir.join("o/config.toml")).unwrap();
    assert!(echo.contains("batch_size = 4"), "{echo}");
    assert!(echo.contains("epochs = 1"), "{echo}");
    assert!(echo.contains("milestones = []"), "{echo}");
    assert!(echo.contains("reduction = 4"), "{echo}");
}

#[test]
fn gradcheck_passes_and_writes_json_only_when_asked() {
    let tmp = TempDir::new().unwrap();
    let out = csa(tmp.path(), &["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!stdout(&out).contains("FAIL"));
    assert_eq!(listing(tmp.path()), Vec::<String>::new());
    let out = csa(tmp.path(), &["gradcheck", "--seed", "5", "--out", "g"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let results: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("g/gradcheck.json")).unwrap()).unwrap();
    assert!(results.as_array().unwrap().iter().all(|r| r["passed"] == true));
}
