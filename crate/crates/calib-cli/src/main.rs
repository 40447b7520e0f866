//! Command-line harness: train runs, penalty sweeps, post-hoc comparison,
//! information tables, ensemble and multi-agent experiments, and the audit.
//!
//! Usage:
//! ```text
//! calib <train|sweep|calibrate|analyze-info|ensemble|multiagent|audit>
//!       [--config <path>] [--out <dir>] [--seeds a,b,c] [--workers n]
//!       [--section.key=value ...]
//! ```
//!
//! Every config-file key can be overridden with a `--section.key=value`
//! flag. Exit codes: 0 full success, 1 any failed run or audit mismatch,
//! 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use calib::error::Error;
use calib::harness::{self, ExperimentConfig};

const USAGE: &str = "usage: calib <command> [options]

commands:
  train         run every configured method across the seed set
  sweep         penalty-strength sweep of the negative-reward objective
  calibrate     post-hoc calibrator comparison on a confidence-trained base
  analyze-info  information quantities for uniform channels k = 1..kmax
  ensemble      train an ensemble, distill a student, save checkpoints
  multiagent    quadrant-domain multi-agent confidence rounds
  audit         recompute a finished run's summary from its raw arrays

options:
  --config <path>        read configuration from a key-value file
  --out <dir>            output directory (default: out)
  --seeds <a,b,c>        shorthand for seeds=a,b,c
  --workers <n>          shorthand for workers=n
  --run <name>           audit only: run id to check (default: default)
  --section.key=value    override any config key
  --help                 print this message";

struct Cli {
    command: String,
    config_path: Option<PathBuf>,
    out_dir: PathBuf,
    run_id: String,
    overrides: Vec<(String, String)>,
}

fn parse_args(args: &[String]) -> Result<Cli, String> {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" {
        return Err(USAGE.to_string());
    }
    let command = args[0].clone();
    let mut cli = Cli {
        command,
        config_path: None,
        out_dir: PathBuf::from("out"),
        run_id: "default".into(),
        overrides: Vec::new(),
    };
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        let take_value = |i: &mut usize| -> Result<String, String> {
            *i += 1;
            args.get(*i)
                .cloned()
                .ok_or_else(|| format!("flag {arg} needs a value"))
        };
        match arg.as_str() {
            "--config" => cli.config_path = Some(PathBuf::from(take_value(&mut i)?)),
            "--out" => cli.out_dir = PathBuf::from(take_value(&mut i)?),
            "--seeds" => {
                let v = take_value(&mut i)?;
                cli.overrides.push(("seeds".into(), v));
            }
            "--workers" => {
                let v = take_value(&mut i)?;
                cli.overrides.push(("workers".into(), v));
            }
            "--run" => cli.run_id = take_value(&mut i)?,
            "--help" | "-h" => return Err(USAGE.to_string()),
            other => {
                let Some(stripped) = other.strip_prefix("--") else {
                    return Err(format!("unexpected argument {other:?}\n\n{USAGE}"));
                };
                let Some((key, value)) = stripped.split_once('=') else {
                    return Err(format!(
                        "override {other:?} must look like --section.key=value"
                    ));
                };
                cli.overrides.push((key.to_string(), value.to_string()));
            }
        }
        i += 1;
    }
    Ok(cli)
}

fn load_config(cli: &Cli) -> calib::Result<ExperimentConfig> {
    match &cli.config_path {
        Some(path) => ExperimentConfig::load(path, &cli.overrides),
        None => ExperimentConfig::parse("", &cli.overrides),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(cli) => cli,
        Err(message) => {
            eprintln!("{message}");
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(Error::Config(message)) => {
            eprintln!("config error: {message}");
            ExitCode::from(2)
        }
        Err(other) => {
            eprintln!("error: {other}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: &Cli) -> calib::Result<ExitCode> {
    match cli.command.as_str() {
        "train" => {
            let config = load_config(cli)?;
            let outcome = harness::run(&config, &cli.out_dir)?;
            for row in &outcome.summary.rows {
                println!(
                    "{:<16} seed {:<3} acc {:.3} ece {:.3} mean_conf {:.3} std_conf {:.3} passes_both {}",
                    row.method, row.seed, row.accuracy, row.ece, row.mean_conf, row.std_conf,
                    row.passes_both
                );
            }
            println!(
                "\nseed-averaged rows (mean over {} seeds):",
                config.seeds.len()
            );
            for agg in &outcome.summary.aggregates {
                println!(
                    "{:<16} acc {:.3}+-{:.3} ece {:.3}+-{:.3} mean_conf {:.3}+-{:.3} std_conf {:.3}+-{:.3}",
                    agg.method,
                    agg.accuracy_mean, agg.accuracy_std,
                    agg.ece_mean, agg.ece_std,
                    agg.mean_conf_mean, agg.mean_conf_std,
                    agg.std_conf_mean, agg.std_conf_std
                );
            }
            println!(
                "gate: {} of {} training rows pass both criteria",
                outcome.summary.gate.offenders.len(),
                outcome.summary.gate.total_rows
            );
            for offender in &outcome.summary.gate.offenders {
                println!("  gate offender: {offender}");
            }
            if !outcome.failures.is_empty() {
                for failure in &outcome.failures {
                    eprintln!("failed: {failure}");
                }
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        "sweep" => {
            let config = load_config(cli)?;
            let table = harness::sweep_alpha(&config, &cli.out_dir)?;
            println!("alpha   accuracy  ece     mean_conf  std_conf");
            for row in &table.rows {
                println!(
                    "{:<7} {:<9.3} {:<7.3} {:<10.3} {:<8.3}",
                    row.alpha, row.accuracy, row.ece, row.mean_conf, row.std_conf
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        "calibrate" => {
            let config = load_config(cli)?;
            let rows = harness::compare_posthoc(&config, &cli.out_dir)?;
            println!("seed method       ece     mean_conf std_conf  passes_both");
            for row in &rows {
                println!(
                    "{:<4} {:<12} {:<7.3} {:<9.3} {:<9.3} {}",
                    row.seed, row.method, row.ece, row.mean_conf, row.std_conf, row.passes_both
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        "analyze-info" => {
            let config = load_config(cli)?;
            let out_path = cli.out_dir.join(&config.run_name).join("info.csv");
            let rows = harness::analyze_info(config.info_kmax, config.info_n, &out_path)?;
            println!("k   H(C*)   I(S;C*)  gap     ece_bound");
            for row in &rows {
                println!(
                    "{:<3} {:<7.4} {:<8.4} {:<7.4} {:.5}",
                    row.k, row.entropy_bits, row.mi_bits, row.gap_bits, row.ece_bound
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        "ensemble" => {
            let config = load_config(cli)?;
            let report = harness::run_ensemble(&config, &cli.out_dir)?;
            println!(
                "ensemble of {} (sigma_max {:.4}): member acc {:?}",
                report.members,
                report.sigma_max,
                report
                    .member_test_accuracy
                    .iter()
                    .map(|a| (a * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>()
            );
            println!(
                "student: acc {:.3} ece {:.3} std_conf {:.3} passes_both {}",
                report.student_accuracy,
                report.student_ece,
                report.student_std_conf,
                report.student_passes_both
            );
            Ok(ExitCode::SUCCESS)
        }
        "multiagent" => {
            let config = load_config(cli)?;
            let report = harness::run_multiagent(&config, &cli.out_dir)?;
            println!(
                "{} agents, {} round(s), domain {} -> {}",
                report.agents, report.rounds, report.source, report.target
            );
            println!(
                "novice conf std on target: {:.4} -> {:.4}",
                report.novice_conf_std_before, report.novice_conf_std_after
            );
            Ok(ExitCode::SUCCESS)
        }
        "audit" => {
            let report = harness::audit(&cli.out_dir, &cli.run_id)?;
            println!("audited {} rows", report.checked_rows);
            if report.mismatches.is_empty() {
                println!("summary matches raw arrays");
                Ok(ExitCode::SUCCESS)
            } else {
                for m in &report.mismatches {
                    eprintln!("mismatch: {m}");
                }
                Ok(ExitCode::from(1))
            }
        }
        other => {
            eprintln!("unknown command {other:?}\n\n{USAGE}");
            Ok(ExitCode::from(2))
        }
    }
}
