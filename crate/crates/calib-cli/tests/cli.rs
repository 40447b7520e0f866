//! End-to-end checks of the `calib` binary: subcommands, exit codes,
//! config overrides, and the audit loop.

use std::path::PathBuf;
use std::process::{Command, Output};

fn calib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calib"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "train",
        "--out",
        out,
        "--dataset.n=120",
        "--split.train=80",
        "--split.val=20",
        "--split.test=20",
        "--train.epochs=2",
        "--seeds",
        "1",
        "--methods=baseline",
        "--posthoc=",
    ];
    args.extend_from_slice(extra);
    args
}

fn temp_out(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("calib-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn train_then_audit_succeeds() {
    let out = temp_out("train");
    let out_s = out.to_str().unwrap();
    let result = calib(&tiny_args(out_s, &[]));
    assert!(
        result.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("baseline"), "row line printed: {stdout}");
    assert!(stdout.contains("gate:"), "gate line printed: {stdout}");
    assert!(out.join("default").join("rows.csv").exists());
    assert!(out.join("default").join("summary.json").exists());

    let audit = calib(&["audit", "--out", out_s, "--run", "default"]);
    assert!(
        audit.status.success(),
        "{}",
        String::from_utf8_lossy(&audit.stderr)
    );
    assert!(String::from_utf8_lossy(&audit.stdout).contains("summary matches"));
}

#[test]
fn audit_flags_tampering_with_exit_one() {
    let out = temp_out("tamper");
    let out_s = out.to_str().unwrap();
    assert!(calib(&tiny_args(out_s, &[])).status.success());
    let raw = out.join("default").join("raw").join("baseline_1_test.csv");
    let text = std::fs::read_to_string(&raw).unwrap();
    let tampered = text.replacen(",1", ",0", 3).replacen(",0", ",1", 1);
    std::fs::write(&raw, tampered).unwrap();
    let audit = calib(&["audit", "--out", out_s, "--run", "default"]);
    assert_eq!(audit.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&audit.stderr).contains("mismatch"));
}

#[test]
fn diverged_runs_are_reported_and_exit_one() {
    let out = temp_out("diverge");
    let out_s = out.to_str().unwrap();
    let result = calib(&tiny_args(out_s, &["--train.lr=1e300"]));
    assert_eq!(result.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&result.stderr).contains("diverged"));
}

#[test]
fn config_errors_exit_two() {
    let bad_key = calib(&["train", "--no.such.key=1"]);
    assert_eq!(bad_key.status.code(), Some(2));

    let bad_value = calib(&["train", "--train.epochs=banana"]);
    assert_eq!(bad_value.status.code(), Some(2));

    let unknown_command = calib(&["fly"]);
    assert_eq!(unknown_command.status.code(), Some(2));

    let missing_config = calib(&["train", "--config", "/nonexistent/calib.cfg"]);
    assert_eq!(missing_config.status.code(), Some(1));
}

#[test]
fn config_file_with_cli_override() {
    let out = temp_out("cfg");
    let out_s = out.to_str().unwrap();
    let cfg = out.join("exp.cfg");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(
        &cfg,
        "run.name = tiny\ndataset.n = 120\nsplit.train = 80\nsplit.val = 20\nsplit.test = 20\n\
         train.epochs = 2\nseeds = 1,2\nmethods = baseline\nposthoc =\n",
    )
    .unwrap();
    let result = calib(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_s,
        "--seeds",
        "2",
    ]);
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    // The override narrowed the seed set to one run.
    let rows = std::fs::read_to_string(out.join("tiny").join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2, "header plus one row: {rows}");
    let config_copy = std::fs::read_to_string(out.join("tiny").join("config.copy")).unwrap();
    assert!(config_copy.contains("seeds = 2"));
}

#[test]
fn analyze_info_writes_table() {
    let out = temp_out("info");
    let out_s = out.to_str().unwrap();
    let result = calib(&["analyze-info", "--out", out_s, "--info.kmax=5"]);
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
    let csv = std::fs::read_to_string(out.join("default").join("info.csv")).unwrap();
    assert!(csv.starts_with("k,entropy_bits,mi_bits,gap_bits,ece_lower_bound\n"));
    assert_eq!(csv.lines().count(), 6, "header plus k=1..5");
}

#[test]
fn sweep_calibrate_ensemble_multiagent_smoke() {
    let out = temp_out("smoke");
    let out_s = out.to_str().unwrap();
    let common = [
        "--out",
        out_s,
        "--dataset.n=400",
        "--split.train=280",
        "--split.val=60",
        "--split.test=60",
        "--train.epochs=2",
        "--seeds",
        "1",
        "--workers",
        "2",
    ];

    let mut sweep_args = vec!["sweep"];
    sweep_args.extend_from_slice(&common);
    sweep_args.push("--sweep.alphas=0,1");
    let sweep = calib(&sweep_args);
    assert!(
        sweep.status.success(),
        "{}",
        String::from_utf8_lossy(&sweep.stderr)
    );
    assert!(out.join("default").join("sweep.csv").exists());

    let mut cal_args = vec!["calibrate"];
    cal_args.extend_from_slice(&common);
    let cal = calib(&cal_args);
    assert!(
        cal.status.success(),
        "{}",
        String::from_utf8_lossy(&cal.stderr)
    );
    assert!(out.join("default").join("posthoc.csv").exists());

    let mut ens_args = vec!["ensemble"];
    ens_args.extend_from_slice(&common);
    ens_args.push("--ensemble.members=2");
    ens_args.push("--ensemble.epochs=2");
    let ens = calib(&ens_args);
    assert!(
        ens.status.success(),
        "{}",
        String::from_utf8_lossy(&ens.stderr)
    );
    assert!(out
        .join("default")
        .join("ensemble")
        .join("manifest.json")
        .exists());
    assert!(out
        .join("default")
        .join("ensemble")
        .join("member_0.json")
        .exists());
    assert!(out
        .join("default")
        .join("ensemble")
        .join("student.json")
        .exists());

    let mut ma_args = vec!["multiagent"];
    ma_args.extend_from_slice(&common);
    ma_args.push("--multiagent.agents=2");
    let ma = calib(&ma_args);
    assert!(
        ma.status.success(),
        "{}",
        String::from_utf8_lossy(&ma.stderr)
    );
    assert!(out.join("default").join("multiagent.json").exists());
}
