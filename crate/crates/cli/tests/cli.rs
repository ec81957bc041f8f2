use std::path::Path;
use std::process::{Command, Output};

fn refseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = refseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "dataset_root": dir.join("data"),
        "ratio": 0.25,
        "corpus": { "patients": 6, "slices_per_patient": 2, "size": 32 },
        "segmenter": { "feature_channels": 8, "prompt_dim": 8 },
        "stage1": { "steps": 3 },
        "ssl": { "feature_channels": 8, "iterations": 3, "eval_every": 0 }
    });
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let hash = |sub: &str| {
        let out = dir.path().join(sub);
        let text = ok(&["generate", "--config", &cfg, "--seed", "4", "--out", out.to_str().unwrap()]);
        text.lines().next().unwrap().split("sha256=").nth(1).unwrap().to_string()
    };
    assert_eq!(hash("a"), hash("b"));
}

#[test]
fn bad_arguments_fail() {
    assert!(!refseg(&["pretrain", "--ratio", "0"]).status.success());
    assert!(!refseg(&["frobnicate"]).status.success());
    assert!(!refseg(&["eval"]).status.success());
    let out = refseg(&["pretrain", "--ratio", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let missing = refseg(&["pretrain", "--config", "/nonexistent/config.json"]);
    assert!(!missing.status.success());
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    ok(&["generate", "--config", &cfg, "--seed", "2"]);
    ok(&["pretrain", "--config", &cfg, "--seed", "2", "--out", out_s]);
    let ssl = ok(&["ssl-train", "--config", &cfg, "--seed", "2", "--out", out_s]);
    assert!(ssl.starts_with("final test mean dice"));
    let student = out.join("student.json");
    ok(&["infer", "--config", &cfg, "--seed", "2", "--out", out_s, "--checkpoint", student.to_str().unwrap()]);
    let from_pngs = ok(&["eval", "--config", &cfg, "--seed", "2", "--out", out_s, "--pred-dir", out.join("pred").to_str().unwrap()]);
    let from_ckpt = ok(&["eval", "--config", &cfg, "--seed", "2", "--out", out_s, "--checkpoint", student.to_str().unwrap()]);
    assert_eq!(from_pngs, from_ckpt);
    assert!(from_ckpt.starts_with("# seed=2 config_hash="));

    // Ground-truth masks as predictions.
    let truth = dir.path().join("data/masks");
    let perfect = ok(&["eval", "--config", &cfg, "--seed", "2", "--out", out_s, "--pred-dir", truth.to_str().unwrap()]);
    let mean_row = perfect.lines().find(|l| l.starts_with("AVG")).unwrap_or_else(|| panic!("{perfect}"));
    assert!(mean_row.split(',').nth(1).unwrap().parse::<f64>().unwrap() == 1.0, "{mean_row}");
}

#[test]
fn no_assistant_needs_no_segmenter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("base");
    ok(&["generate", "--config", &cfg]);
    ok(&["ssl-train", "--config", &cfg, "--no-assistant", "--iters", "2", "--out", out.to_str().unwrap()]);
    assert!(out.join("student.json").exists());
    assert!(!out.join("segmenter.json").exists());
}
