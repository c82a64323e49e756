use std::path::Path;
use std::process::{Command, Output};

fn sce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sce")).args(args).env("SCE_THREADS", "1").output().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"seed = 1
epochs = 2
batch_size = 16
queue_size = 48
output_dir = "{}"
optim.warmup_epochs = 1
encoder.image_size = 8
encoder.widths = [4, 8]
projector.hidden = [16]
projector.output = 8
data.blobs.per_class = 16
data.blobs.image_size = 8
probe.epochs = 3
probe.milestones = [2]
train.record_wall_time = false
"#,
        dir.join("run").display()
    );
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = sce(&["verify", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(!sce(&[]).status.success());
}

#[test]
fn verify_passes_on_this_build() {
    let out = sce(&["verify", "--trials", "3"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("decomposition [f32]"));
    assert_eq!(text.matches("gradient [").count(), 4);
    assert!(!text.contains("FAILED"));
}

#[test]
fn pretrain_with_missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = sce(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "data.kind = \"cifar10\"",
        "--set",
        "data.path = \"/nonexistent/data_batch_1.bin\"",
        "--set",
        "encoder.image_size = 32",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/data_batch_1.bin"));
}

#[test]
fn pretrain_probe_and_simdist_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = sce(&["pretrain", "--config", cfg.to_str().unwrap(), "--probe", "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let steps = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = steps.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["header"], true);
    assert_eq!(lines.len(), 1 + 2 * 4);
    for (i, line) in lines[1..].iter().enumerate() {
        assert_eq!(line["step"], i as u64 + 1);
        for key in ["epoch", "lr", "ema_m", "loss", "loss_infonce", "loss_ressl", "loss_ceil", "queue_fill", "wall_ms"] {
            assert!(line.get(key).is_some(), "missing {key}");
        }
    }
    assert!(run.join("probe.json").exists());

    let ckpt = run.join("checkpoint.ckpt");
    let out = sce(&["probe", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let probe: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(probe["test_samples"], 12);

    let out = sce(&["simdist", "--checkpoint", ckpt.to_str().unwrap(), "--samples", "20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("simdist.json")).unwrap()).unwrap();
    assert_eq!(report["weak_similarities"].as_array().unwrap().len(), 20);
}

#[test]
fn sweep_produces_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = sce(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "lambda", "--values", "0,0.5,1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(dir.path().join("run").join("sweep.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = rows.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1]["value"], "0.5");
    assert_eq!(rows[2]["param"], "objective.lambda");
}

#[test]
fn sweep_accepts_objective_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = sce(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "objective", "--values", "infonce,ressl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
