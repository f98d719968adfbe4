use std::path::Path;
use std::process::{Command, Output};

fn astr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_astr"))
        .args(args)
        .current_dir(dir)
        .env_remove("ASTR_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn synthetic(dir: &Path, frames: &str) {
    let o = astr(dir, &["gen-synthetic", "--out-dir", "vid", "--frames", frames, "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = astr(dir.path(), &[]);
    assert_eq!(code(&o), 1);
    let text = String::from_utf8_lossy(&o.stdout).to_string() + &String::from_utf8_lossy(&o.stderr);
    assert!(text.contains("Usage"));
}

#[test]
fn unknown_subcommand_fails_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = astr(dir.path(), &["transmogrify"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = astr(dir.path(), &["selfcheck"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.lines().count() >= 10);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn bench_fusion_row_carries_formula_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = astr(
        dir.path(),
        &["bench-fusion", "--h", "16", "--w", "16", "--c", "32", "--t", "3", "--m", "50", "--reps", "5"],
    );
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("h,w,c,t,m,dense_macs,sparse_macs,dense_ms,sparse_ms"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..7], ["16", "16", "32", "3", "50", "6291456", "409600"]);
}

#[test]
fn bench_fusion_rejects_too_many_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let o = astr(dir.path(), &["bench-fusion", "--h", "2", "--w", "2", "--c", "4", "--t", "2", "--m", "9"]);
    assert_eq!(code(&o), 1);
    assert!(o.stdout.is_empty());
}

#[test]
fn forward_is_reproducible_from_saved_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synthetic(d, "3");
    let frames = ["vid/frame_000.png", "vid/frame_001.png", "vid/frame_002.png"];
    let mut a = vec!["forward", "--frames"];
    a.extend(frames);
    a.extend(["--output", "a.png", "--save-weights", "w.bin", "--record", "a.jsonl"]);
    assert_eq!(code(&astr(d, &a)), 0);

    let mut b = vec!["forward", "--frames"];
    b.extend(frames);
    b.extend(["--output", "b.png", "--weights", "w.bin", "--seed", "999"]);
    let o = astr(d, &b);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(d.join("a.png")).unwrap(), std::fs::read(d.join("b.png")).unwrap());

    let rec: serde_json::Value = serde_json::from_str(std::fs::read_to_string(d.join("a.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(rec["token_counts"].as_array().unwrap().len(), 2);
    assert!(rec["elapsed_ms"].as_f64().unwrap() > 0.0);
    let line: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(line["target"], 2);
}

#[test]
fn missing_input_is_an_io_failure_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = astr(dir.path(), &["forward", "--frames", "absent.png", "--output", "out.png"]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("out.png").exists());
    assert!(o.stdout.is_empty());
}

#[test]
fn eval_metrics_writes_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synthetic(d, "2");
    std::fs::write(
        d.join("vid/pairs.txt"),
        "# pred,gt\nmask_000.png,mask_000.png\nmask_001.png,mask_001.png\n",
    )
    .unwrap();
    let o = astr(d, &["eval-metrics", "--manifest", "vid/pairs.txt", "--output", "m.csv", "--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "frame_id,mae,iou,dice,sen,spe");
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3], "mean,0.000000,1.000000,1.000000,1.000000,1.000000");
}

#[test]
fn eval_metrics_rejects_malformed_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.txt"), "only_one_field.png\n").unwrap();
    let o = astr(dir.path(), &["eval-metrics", "--manifest", "bad.txt", "--output", "m.csv"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    assert!(!dir.path().join("m.csv").exists());
}

#[test]
fn loss_check_reports_small_gradient_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = astr(dir.path(), &["loss-check", "--size", "8", "--pixels", "40"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["max_grad_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["report"]["lambda_aux"], 0.3);
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), "seed = 1\n").unwrap();
    let seed_of = |extra_env: Option<&str>, args: &[&str]| -> u64 {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_astr"));
        cmd.args(["--config", "c.toml", "loss-check", "--size", "4", "--pixels", "1"]).args(args).current_dir(d);
        match extra_env {
            Some(v) => cmd.env("ASTR_SEED", v),
            None => cmd.env_remove("ASTR_SEED"),
        };
        let o = cmd.output().unwrap();
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(None, &[]), 1);
    assert_eq!(seed_of(Some("2"), &[]), 2);
    assert_eq!(seed_of(Some("2"), &["--seed", "3"]), 3);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[model]\nwidth = 3\n").unwrap();
    let o = astr(dir.path(), &["--config", "c.toml", "selfcheck"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}

#[test]
fn asma_convert_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synthetic(d, "1");
    let o = astr(d, &["asma-convert", "--input", "vid/frame_000.png", "--output", "lin.png", "--oversample", "2"]);
    assert_eq!(code(&o), 0);
    let o = astr(d, &["asma-convert", "--input", "lin.png", "--output", "fan.png", "--from", "linear", "--oversample", "2"]);
    assert_eq!(code(&o), 0);
    let o = astr(d, &["asma-roundtrip", "--input", "vid/frame_000.png", "--oversample", "2"]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["grid"], serde_json::json!([128, 128]));
    assert!(v["interior_mae"].as_f64().unwrap() < 0.05);
}
