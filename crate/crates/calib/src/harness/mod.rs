//! Experiment orchestration: the default method-by-seed run, the penalty
//! sweep, the post-hoc comparison, information-theory table generation,
//! ensemble/multi-agent commands, persistence, and the audit pass.

pub mod config;
pub mod persist;

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{DatasetKind, ExperimentConfig, DEFAULT_EPOCHS, DEFAULT_SEEDS};
pub use persist::RunPaths;

use crate::data::{load_csv, make_two_moons, split, Dataset};
use crate::ensemble::{build_agent_pool, distill_student, multi_agent_round, train_ensemble};
use crate::error::{Error, Result};
use crate::info::{
    ece_lower_bound, information_gap, mutual_information, source_entropy, JointDistribution,
};
use crate::metrics::{evaluate, EvalReport};
use crate::model::forward_eval;
use crate::posthoc::{
    compression_report, confidence_labels, confidence_logits, fit_isotonic, fit_platt,
    fit_temperature, CalibrationMap, CompressionReport, DEFAULT_FIT_ITERS, DEFAULT_PLATT_LR,
    DEFAULT_TEMP_LR,
};
use crate::train::{train, Method, TrainingTrace};
use persist::{f as fsig, raw_csv, reliability_csv, trace_csv, write_file};

/// Method label of the dedicated confidence-trained run the post-hoc
/// calibrators operate on.
pub const POSTHOC_BASE_LABEL: &str = "posthoc_base";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub mean_conf: f64,
    pub std_conf: f64,
    pub passes_both: bool,
    /// Wall-clock seconds; written to rows.csv only so summaries stay
    /// byte-reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub n_seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub ece_mean: f64,
    pub ece_std: f64,
    pub mce_mean: f64,
    pub mean_conf_mean: f64,
    pub mean_conf_std: f64,
    pub std_conf_mean: f64,
    pub std_conf_std: f64,
    pub any_passes_both: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosthocRow {
    pub seed: u64,
    pub method: String,
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub mean_conf: f64,
    pub std_conf: f64,
    pub passes_both: bool,
    pub compression: Option<CompressionReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateReport {
    pub total_rows: usize,
    pub any_passes: bool,
    pub offenders: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub run_id: String,
    pub n_bins: usize,
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
    pub posthoc: Vec<PosthocRow>,
    pub gate: GateReport,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: Summary,
    /// Human-readable descriptions of failed jobs; the harness finishes the
    /// rest and reports these.
    pub failures: Vec<String>,
}

/// Train/val/test splits resolved from a configuration.
pub struct ResolvedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn resolve_dataset(config: &ExperimentConfig) -> Result<ResolvedData> {
    let full = match config.dataset_kind {
        DatasetKind::TwoMoons => {
            make_two_moons(config.dataset_n, config.dataset_noise, config.dataset_seed)
        }
        DatasetKind::Csv => {
            let path = config.csv_path.as_ref().expect("validated");
            let ds = load_csv(path, &config.label_column)?;
            let total = config
                .split_sizes
                .0
                .checked_add(config.split_sizes.1)
                .and_then(|t| t.checked_add(config.split_sizes.2))
                .ok_or_else(|| Error::Config("split sizes overflow".into()))?;
            if total > ds.len() {
                return Err(Error::Config(format!(
                    "split sizes {:?} oversubscribe csv dataset of {} rows",
                    config.split_sizes,
                    ds.len()
                )));
            }
            ds
        }
    };
    let (train, val, test) = split(&full, config.split_sizes, config.split_seed);
    Ok(ResolvedData { train, val, test })
}

struct JobOutput {
    row: ResultRow,
    report: EvalReport,
    trace: TrainingTrace,
    test_conf: Vec<f64>,
    test_correct: Vec<bool>,
    val_conf: Vec<f64>,
    val_correct: Vec<bool>,
}

fn run_one_job(
    run_id: &str,
    label: &str,
    method: Method,
    seed: u64,
    config: &ExperimentConfig,
    data: &ResolvedData,
) -> Result<JobOutput> {
    let started = Instant::now();
    let tc = config.train_config(method, seed)?;
    let (model, trace) = train(&tc, &data.train, &data.val)?;
    let (test_conf, test_correct) = model.conf_correct(&data.test);
    let (val_conf, val_correct) = model.conf_correct(&data.val);
    let report = evaluate(&test_conf, &test_correct, config.n_bins);
    let row = ResultRow {
        run_id: run_id.to_string(),
        method: label.to_string(),
        seed,
        accuracy: report.accuracy,
        ece: report.ece,
        mce: report.mce,
        mean_conf: report.mean_conf,
        std_conf: report.std_conf,
        passes_both: report.passes_both,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(JobOutput {
        row,
        report,
        trace,
        test_conf,
        test_correct,
        val_conf,
        val_correct,
    })
}

/// Run every job through a fixed-size worker pool, preserving input order
/// in the output. Panics inside a job are contained and surface as error
/// strings.
fn parallel_jobs<T, R, F>(
    items: Vec<T>,
    workers: usize,
    job: F,
) -> Vec<std::result::Result<R, String>>
where
    T: Send + Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let n = items.len();
    let results: Mutex<Vec<Option<std::result::Result<R, String>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let items_ref = &items;
    let job_ref = &job;
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n).max(1) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= n {
                    break;
                }
                let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    job_ref(&items_ref[idx])
                }));
                let entry = match outcome {
                    Ok(Ok(r)) => Ok(r),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(panic) => Err(panic_message(&panic)),
                };
                results.lock().unwrap()[idx] = Some(entry);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every job slot filled"))
        .collect()
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic: <opaque>".into()
    }
}

/// The default experiment: every configured method by every seed, plus the
/// post-hoc comparison on the configured base method's runs (reused when
/// that method is in the list, trained separately otherwise). Persists
/// rows.csv, raw confidence arrays, traces, reliability tables, the
/// post-hoc table, and summary.json under `<out_dir>/<run.name>/`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    let data = resolve_dataset(config)?;
    let run_id = config.run_name.clone();
    let paths = RunPaths::new(out_dir, &run_id);

    #[derive(Clone)]
    struct Spec {
        label: String,
        method: Method,
        seed: u64,
    }
    let mut specs: Vec<Spec> = Vec::new();
    for &method in &config.methods {
        for &seed in &config.seeds {
            specs.push(Spec {
                label: method.name().to_string(),
                method,
                seed,
            });
        }
    }
    // The post-hoc comparison calibrates the configured base method's runs;
    // when that method is already in the list its outputs are reused,
    // otherwise dedicated base runs are added.
    let run_posthoc = !config.posthoc.is_empty();
    let base_label = if config.methods.contains(&config.posthoc_base_method) {
        config.posthoc_base_method.name().to_string()
    } else {
        POSTHOC_BASE_LABEL.to_string()
    };
    if run_posthoc && base_label == POSTHOC_BASE_LABEL {
        for &seed in &config.seeds {
            specs.push(Spec {
                label: POSTHOC_BASE_LABEL.to_string(),
                method: config.posthoc_base_method,
                seed,
            });
        }
    }

    let results = parallel_jobs(specs.clone(), config.workers, |spec| {
        run_one_job(&run_id, &spec.label, spec.method, spec.seed, config, &data)
    });

    let mut failures = Vec::new();
    let mut outputs: Vec<(Spec, JobOutput)> = Vec::new();
    for (spec, result) in specs.into_iter().zip(results) {
        match result {
            Ok(out) => outputs.push((spec, out)),
            Err(message) => failures.push(format!("{} seed {}: {message}", spec.label, spec.seed)),
        }
    }

    // Post-hoc calibration on the base method's runs.
    let mut posthoc_rows = Vec::new();
    if run_posthoc {
        for (spec, out) in outputs.iter().filter(|(s, _)| s.label == base_label) {
            match posthoc_for_seed(config, out) {
                Ok(mut rows) => posthoc_rows.append(&mut rows),
                Err(e) => failures.push(format!("posthoc seed {}: {e}", spec.seed)),
            }
        }
        posthoc_rows.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.method.cmp(&b.method)));
    }

    // Persist per-run artifacts in deterministic order.
    write_file(&paths.config_copy(), &config.canonical_text())?;
    let mut rows: Vec<ResultRow> = Vec::new();
    for (spec, out) in &outputs {
        rows.push(out.row.clone());
        write_file(
            &paths.raw(&spec.label, spec.seed, "test"),
            &raw_csv(&out.test_conf, &out.test_correct),
        )?;
        write_file(
            &paths.raw(&spec.label, spec.seed, "val"),
            &raw_csv(&out.val_conf, &out.val_correct),
        )?;
        write_file(&paths.trace(&spec.label, spec.seed), &trace_csv(&out.trace))?;
        write_file(
            &paths.reliability(&spec.label, spec.seed),
            &reliability_csv(&out.report),
        )?;
    }
    let aggregates = aggregate_rows(&rows);
    let gate = gate_report(&rows);
    let summary = Summary {
        run_id: run_id.clone(),
        n_bins: config.n_bins,
        rows: rows.clone(),
        aggregates,
        posthoc: posthoc_rows.clone(),
        gate,
    };
    write_file(&paths.rows_csv(), &rows_csv_text(&rows))?;
    if run_posthoc {
        write_file(&paths.table("posthoc"), &posthoc_csv_text(&posthoc_rows))?;
    }
    write_file(
        &paths.summary_json(),
        &serde_json::to_string_pretty(&summary)?,
    )?;

    Ok(RunOutcome { summary, failures })
}

fn posthoc_for_seed(config: &ExperimentConfig, out: &JobOutput) -> Result<Vec<PosthocRow>> {
    let seed = out.row.seed;
    let mut rows = Vec::new();
    let raw_report = evaluate(&out.test_conf, &out.test_correct, config.n_bins);
    rows.push(PosthocRow {
        seed,
        method: "none".into(),
        accuracy: raw_report.accuracy,
        ece: raw_report.ece,
        mce: raw_report.mce,
        mean_conf: raw_report.mean_conf,
        std_conf: raw_report.std_conf,
        passes_both: raw_report.passes_both,
        compression: None,
    });
    for name in &config.posthoc {
        let map = fit_map(name, &out.val_conf, &out.val_correct)?;
        let calibrated = apply_map(&map, &out.test_conf)?;
        let report = evaluate(&calibrated, &out.test_correct, config.n_bins);
        let compression = compression_report(
            &out.test_conf,
            &calibrated,
            &out.test_correct,
            raw_report.accuracy,
            config.n_bins,
        );
        rows.push(PosthocRow {
            seed,
            method: name.clone(),
            accuracy: report.accuracy,
            ece: report.ece,
            mce: report.mce,
            mean_conf: report.mean_conf,
            std_conf: report.std_conf,
            passes_both: report.passes_both,
            compression: Some(compression),
        });
    }
    Ok(rows)
}

/// Fit one named calibrator on validation confidences and correctness.
pub fn fit_map(name: &str, val_conf: &[f64], val_correct: &[bool]) -> Result<CalibrationMap> {
    match name {
        "temperature" => {
            let logits = confidence_logits(val_conf);
            let labels = confidence_labels(val_correct);
            fit_temperature(&logits, &labels, DEFAULT_FIT_ITERS, DEFAULT_TEMP_LR)
        }
        "platt" => fit_platt(
            val_conf,
            val_correct,
            4 * DEFAULT_FIT_ITERS,
            DEFAULT_PLATT_LR,
        ),
        "isotonic" => Ok(fit_isotonic(val_conf, val_correct)),
        other => Err(Error::Config(format!("unknown posthoc method {other:?}"))),
    }
}

/// Apply a fitted calibrator to a confidence channel.
pub fn apply_map(map: &CalibrationMap, conf: &[f64]) -> Result<Vec<f64>> {
    match map {
        CalibrationMap::Temperature { .. } => {
            let logits = confidence_logits(conf);
            let probs = map.apply_logits(&logits)?;
            Ok((0..probs.rows()).map(|i| probs.at(i, 0)).collect())
        }
        other => other.apply_scores(conf),
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate_rows(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut methods: Vec<String> = Vec::new();
    for row in rows {
        if !methods.contains(&row.method) {
            methods.push(row.method.clone());
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let group: Vec<&ResultRow> = rows.iter().filter(|r| r.method == method).collect();
            let (accuracy_mean, accuracy_std) = mean_std(group.iter().map(|r| r.accuracy));
            let (ece_mean, ece_std) = mean_std(group.iter().map(|r| r.ece));
            let (mce_mean, _) = mean_std(group.iter().map(|r| r.mce));
            let (mean_conf_mean, mean_conf_std) = mean_std(group.iter().map(|r| r.mean_conf));
            let (std_conf_mean, std_conf_std) = mean_std(group.iter().map(|r| r.std_conf));
            AggregateRow {
                method,
                n_seeds: group.len(),
                accuracy_mean,
                accuracy_std,
                ece_mean,
                ece_std,
                mce_mean,
                mean_conf_mean,
                mean_conf_std,
                std_conf_mean,
                std_conf_std,
                any_passes_both: group.iter().any(|r| r.passes_both),
            }
        })
        .collect()
}

fn gate_report(rows: &[ResultRow]) -> GateReport {
    let offenders: Vec<String> = rows
        .iter()
        .filter(|r| r.passes_both)
        .map(|r| {
            format!(
                "{} seed {} (ece {:.4}, std {:.4})",
                r.method, r.seed, r.ece, r.std_conf
            )
        })
        .collect();
    GateReport {
        total_rows: rows.len(),
        any_passes: !offenders.is_empty(),
        offenders,
    }
}

fn rows_csv_text(rows: &[ResultRow]) -> String {
    let mut out = String::from(
        "run_id,method,seed,accuracy,ece,mce,mean_conf,std_conf,passes_both,wall_time_s\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.method,
            r.seed,
            fsig(r.accuracy),
            fsig(r.ece),
            fsig(r.mce),
            fsig(r.mean_conf),
            fsig(r.std_conf),
            r.passes_both,
            fsig(r.wall_time_s)
        ));
    }
    out
}

fn posthoc_csv_text(rows: &[PosthocRow]) -> String {
    let mut out = String::from(
        "seed,method,accuracy,ece,mce,mean_conf,std_conf,passes_both,delta_var,bound,holds\n",
    );
    for r in rows {
        let (dv, bound, holds) = match &r.compression {
            Some(c) => (fsig(c.delta_var), fsig(c.bound), c.holds.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.seed,
            r.method,
            fsig(r.accuracy),
            fsig(r.ece),
            fsig(r.mce),
            fsig(r.mean_conf),
            fsig(r.std_conf),
            r.passes_both,
            dv,
            bound,
            holds
        ));
    }
    out
}

// ---- penalty sweep ------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSeedRow {
    pub alpha: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_conf: f64,
    pub std_conf: f64,
    pub conf_min: f64,
    pub conf_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_conf: f64,
    pub std_conf: f64,
    pub conf_min: f64,
    pub conf_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub per_seed: Vec<SweepSeedRow>,
}

/// Penalty sweep: the negative-reward objective across the configured
/// alpha grid, one aggregated row per alpha (seed means).
pub fn sweep_alpha(config: &ExperimentConfig, out_dir: &Path) -> Result<SweepTable> {
    let data = resolve_dataset(config)?;
    let mut jobs = Vec::new();
    for &alpha in &config.sweep_alphas {
        for &seed in &config.seeds {
            jobs.push((alpha, seed));
        }
    }
    let results = parallel_jobs(jobs.clone(), config.workers, |&(alpha, seed)| {
        let mut tc = config.train_config(Method::NegReward, seed)?;
        tc.nr.alpha = alpha;
        let (model, _) = train(&tc, &data.train, &data.val)?;
        let (conf, correct) = model.conf_correct(&data.test);
        let report = evaluate(&conf, &correct, config.n_bins);
        let conf_min = conf.iter().cloned().fold(f64::INFINITY, f64::min);
        let conf_max = conf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(SweepSeedRow {
            alpha,
            seed,
            accuracy: report.accuracy,
            ece: report.ece,
            mean_conf: report.mean_conf,
            std_conf: report.std_conf,
            conf_min,
            conf_max,
        })
    });
    let mut per_seed = Vec::new();
    for ((alpha, seed), result) in jobs.into_iter().zip(results) {
        match result {
            Ok(row) => per_seed.push(row),
            Err(message) => {
                return Err(Error::Config(format!(
                    "sweep alpha {alpha} seed {seed}: {message}"
                )))
            }
        }
    }
    let rows: Vec<SweepRow> = config
        .sweep_alphas
        .iter()
        .map(|&alpha| {
            let group: Vec<&SweepSeedRow> = per_seed.iter().filter(|r| r.alpha == alpha).collect();
            let mean = |f: fn(&SweepSeedRow) -> f64| {
                group.iter().map(|r| f(r)).sum::<f64>() / group.len() as f64
            };
            SweepRow {
                alpha,
                accuracy: mean(|r| r.accuracy),
                ece: mean(|r| r.ece),
                mean_conf: mean(|r| r.mean_conf),
                std_conf: mean(|r| r.std_conf),
                conf_min: mean(|r| r.conf_min),
                conf_max: mean(|r| r.conf_max),
            }
        })
        .collect();

    let paths = RunPaths::new(out_dir, &config.run_name);
    let mut csv = String::from("alpha,accuracy,ece,mean_conf,std_conf,conf_min,conf_max\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fsig(r.alpha),
            fsig(r.accuracy),
            fsig(r.ece),
            fsig(r.mean_conf),
            fsig(r.std_conf),
            fsig(r.conf_min),
            fsig(r.conf_max)
        ));
    }
    write_file(&paths.table("sweep"), &csv)?;
    let table = SweepTable { rows, per_seed };
    write_file(
        &paths.root.join("sweep_summary.json"),
        &serde_json::to_string_pretty(&table)?,
    )?;
    Ok(table)
}

// ---- posthoc comparison -------------------------------------------------

/// The post-hoc comparison alone: a confidence-trained base per seed,
/// calibrators fitted on validation, evaluated on test.
pub fn compare_posthoc(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PosthocRow>> {
    let data = resolve_dataset(config)?;
    let run_id = config.run_name.clone();
    let seeds = config.seeds.clone();
    let results = parallel_jobs(seeds.clone(), config.workers, |&seed| {
        let out = run_one_job(
            &run_id,
            POSTHOC_BASE_LABEL,
            config.posthoc_base_method,
            seed,
            config,
            &data,
        )?;
        posthoc_for_seed(config, &out)
    });
    let mut rows = Vec::new();
    for (seed, result) in seeds.into_iter().zip(results) {
        match result {
            Ok(mut r) => rows.append(&mut r),
            Err(message) => return Err(Error::Fit(format!("posthoc seed {seed}: {message}"))),
        }
    }
    rows.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.method.cmp(&b.method)));
    let paths = RunPaths::new(out_dir, &config.run_name);
    write_file(&paths.table("posthoc"), &posthoc_csv_text(&rows))?;
    Ok(rows)
}

// ---- information table --------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InfoRow {
    pub k: usize,
    pub entropy_bits: f64,
    pub mi_bits: f64,
    pub gap_bits: f64,
    pub ece_bound: f64,
}

/// Information quantities for uniform channels k = 1..=kmax with natural
/// conditionals, plus the calibration lower bound at the configured sample
/// count.
pub fn analyze_info(kmax: usize, n: usize, out_path: &Path) -> Result<Vec<InfoRow>> {
    assert!(kmax >= 2, "analyze_info: kmax {kmax} < 2");
    let rows: Vec<InfoRow> = (1..=kmax)
        .map(|k| {
            let j = JointDistribution::uniform_channel(k);
            let entropy = source_entropy(&j);
            let mi = mutual_information(&j);
            let gap = information_gap(&j);
            InfoRow {
                k,
                entropy_bits: entropy,
                mi_bits: mi,
                gap_bits: gap,
                ece_bound: ece_lower_bound(k, n, entropy),
            }
        })
        .collect();
    let mut csv = String::from("k,entropy_bits,mi_bits,gap_bits,ece_lower_bound\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.k,
            fsig(r.entropy_bits),
            fsig(r.mi_bits),
            fsig(r.gap_bits),
            fsig(r.ece_bound)
        ));
    }
    write_file(out_path, &csv)?;
    write_file(
        &out_path.with_extension("json"),
        &serde_json::to_string_pretty(&rows)?,
    )?;
    Ok(rows)
}

// ---- ensemble / multi-agent commands -------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub members: usize,
    pub seeds: Vec<u64>,
    pub sigma_max: f64,
    pub member_test_accuracy: Vec<f64>,
    pub student_accuracy: f64,
    pub student_ece: f64,
    pub student_std_conf: f64,
    pub student_passes_both: bool,
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    seeds: Vec<u64>,
    sigma_max: f64,
}

/// Train an ensemble on the train split, distill a student, evaluate on
/// test, and persist one checkpoint per member plus a manifest.
pub fn run_ensemble(config: &ExperimentConfig, out_dir: &Path) -> Result<EnsembleReport> {
    let data = resolve_dataset(config)?;
    let mut tc = config.train_config(Method::Baseline, config.seeds[0])?;
    tc.epochs = config.ensemble_epochs;
    let ensemble = train_ensemble(config.ensemble_members, &tc, &data.train)?;

    let member_test_accuracy: Vec<f64> = ensemble
        .members
        .iter()
        .map(|m| {
            let out = forward_eval(&m.params, &data.test.features);
            out.predictions()
                .iter()
                .zip(&data.test.labels)
                .filter(|(p, y)| p == y)
                .count() as f64
                / data.test.len() as f64
        })
        .collect();

    let (student, _) = distill_student(&ensemble, &data.train, config.ensemble_lambda, &tc)?;
    let (conf, correct) = student.conf_correct(&data.test);
    let report = evaluate(&conf, &correct, config.n_bins);

    let paths = RunPaths::new(out_dir, &config.run_name);
    let ensemble_dir = paths.root.join("ensemble");
    std::fs::create_dir_all(&ensemble_dir).map_err(|source| Error::Io {
        path: ensemble_dir.clone(),
        source,
    })?;
    for (i, member) in ensemble.members.iter().enumerate() {
        crate::model::save_checkpoint(
            &member.params,
            &ensemble_dir.join(format!("member_{i}.json")),
        )?;
    }
    let manifest = EnsembleManifest {
        seeds: ensemble.seeds.clone(),
        sigma_max: ensemble.sigma_max,
    };
    write_file(
        &ensemble_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    crate::model::save_checkpoint(&student.params, &ensemble_dir.join("student.json"))?;

    let report = EnsembleReport {
        members: config.ensemble_members,
        seeds: ensemble.seeds,
        sigma_max: ensemble.sigma_max,
        member_test_accuracy,
        student_accuracy: report.accuracy,
        student_ece: report.ece,
        student_std_conf: report.std_conf,
        student_passes_both: report.passes_both,
    };
    write_file(
        &paths.root.join("ensemble.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiAgentReport {
    pub agents: usize,
    pub rounds: usize,
    pub source: usize,
    pub target: usize,
    pub rankings_before: Vec<Vec<f64>>,
    pub rankings_after: Vec<Vec<f64>>,
    pub novice_conf_std_before: f64,
    pub novice_conf_std_after: f64,
}

/// Quadrant-domain multi-agent confidence rounds on the configured dataset.
/// Domains are the four feature-space quadrants around the training-set
/// means, each split 80/20 into train/held-out parts.
pub fn run_multiagent(config: &ExperimentConfig, out_dir: &Path) -> Result<MultiAgentReport> {
    let data = resolve_dataset(config)?;
    let (domains_train, domains_held) = quadrant_domains(&data.train, config.split_seed)?;
    // Agents train under binary supervision with the negative-reward
    // objective so their confidence heads carry an input-dependent signal
    // worth pooling.
    let tc = config.train_config(Method::NegReward, config.seeds[0])?;
    let mut pool = build_agent_pool(config.multiagent_agents, &data.train, &domains_held, &tc)?;
    let rankings_before = pool.rankings.clone();

    let source = config.multiagent_source;
    let target = config.multiagent_target;
    if source >= domains_train.len() || target >= domains_train.len() {
        return Err(Error::Config(format!(
            "multiagent source/target {source}/{target} out of range for {} domains",
            domains_train.len()
        )));
    }

    let experts = pool.experts(source);
    let novices: Vec<usize> = (0..pool.agents.len())
        .filter(|a| !experts.contains(a))
        .collect();
    let novice_conf_std_before = novice_std(&pool, &novices, &domains_held[target]);

    let mut finetune = tc.clone();
    finetune.epochs = (tc.epochs / 4).max(1);
    finetune.lambda = config.ensemble_lambda;
    for _ in 0..config.multiagent_rounds {
        pool = multi_agent_round(pool, source, target, &domains_train[target], &finetune)?;
    }
    let novice_conf_std_after = novice_std(&pool, &novices, &domains_held[target]);

    let report = MultiAgentReport {
        agents: config.multiagent_agents,
        rounds: config.multiagent_rounds,
        source,
        target,
        rankings_before,
        rankings_after: pool.rankings.clone(),
        novice_conf_std_before,
        novice_conf_std_after,
    };
    let paths = RunPaths::new(out_dir, &config.run_name);
    write_file(
        &paths.root.join("multiagent.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

fn novice_std(pool: &crate::ensemble::AgentPool, novices: &[usize], domain: &Dataset) -> f64 {
    let mut all = Vec::new();
    for &n in novices {
        all.extend(forward_eval(&pool.agents[n].params, &domain.features).confidences());
    }
    if all.len() < 2 {
        return 0.0;
    }
    crate::metrics::population_std(&all)
}

/// Split a dataset into its four feature-space quadrants around the mean
/// point, then split each quadrant 80/20 into train/held-out parts.
pub fn quadrant_domains(ds: &Dataset, seed: u64) -> Result<(Vec<Dataset>, Vec<Dataset>)> {
    let n = ds.len();
    let mean_x = (0..n).map(|i| ds.features.at(i, 0)).sum::<f64>() / n as f64;
    let mean_y = (0..n).map(|i| ds.features.at(i, 1)).sum::<f64>() / n as f64;
    let mut quadrants: Vec<Vec<usize>> = vec![Vec::new(); 4];
    for i in 0..n {
        let q = match (
            ds.features.at(i, 0) >= mean_x,
            ds.features.at(i, 1) >= mean_y,
        ) {
            (true, true) => 0,
            (false, true) => 1,
            (false, false) => 2,
            (true, false) => 3,
        };
        quadrants[q].push(i);
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (q, indices) in quadrants.iter().enumerate() {
        if indices.len() < 10 {
            return Err(Error::Data(format!(
                "quadrant {q} has only {} points; dataset too small for domain partitioning",
                indices.len()
            )));
        }
        let sub = ds.subset(indices, format!("{}.q{q}", ds.name));
        let n_held = indices.len() / 5;
        let n_train = indices.len() - n_held;
        let (tr, he, _) = split(&sub, (n_train, n_held, 0), seed ^ (q as u64 + 1));
        train.push(tr);
        held.push(he);
    }
    Ok((train, held))
}

// ---- audit ----------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked_rows: usize,
    pub mismatches: Vec<String>,
}

const AUDIT_TOLERANCE: f64 = 2e-5;

/// Recompute the summary from persisted raw confidence arrays and compare.
/// Catches bit rot, by-hand edits, and formatter drift.
pub fn audit(out_dir: &Path, run_id: &str) -> Result<AuditReport> {
    let paths = RunPaths::new(out_dir, run_id);
    let summary: Summary = serde_json::from_str(&persist::read_file(&paths.summary_json())?)?;
    let mut mismatches = Vec::new();
    for row in &summary.rows {
        let raw_path = paths.raw(&row.method, row.seed, "test");
        let (conf, correct) = persist::parse_raw_csv(&persist::read_file(&raw_path)?, &raw_path)?;
        let report = evaluate(&conf, &correct, summary.n_bins);
        let checks = [
            ("accuracy", row.accuracy, report.accuracy),
            ("ece", row.ece, report.ece),
            ("mce", row.mce, report.mce),
            ("mean_conf", row.mean_conf, report.mean_conf),
            ("std_conf", row.std_conf, report.std_conf),
        ];
        for (what, stored, recomputed) in checks {
            if (stored - recomputed).abs() > AUDIT_TOLERANCE {
                mismatches.push(format!(
                    "{} seed {}: {what} stored {stored} vs recomputed {recomputed}",
                    row.method, row.seed
                ));
            }
        }
        if report.passes_both != row.passes_both {
            mismatches.push(format!(
                "{} seed {}: passes_both flag drifted",
                row.method, row.seed
            ));
        }
    }
    // Aggregates must be recomputable from the stored rows.
    let expected = aggregate_rows(&summary.rows);
    if expected.len() != summary.aggregates.len() {
        mismatches.push("aggregate row count drifted".into());
    } else {
        for (stored, fresh) in summary.aggregates.iter().zip(&expected) {
            if stored.method != fresh.method
                || (stored.accuracy_mean - fresh.accuracy_mean).abs() > AUDIT_TOLERANCE
                || (stored.ece_mean - fresh.ece_mean).abs() > AUDIT_TOLERANCE
                || (stored.std_conf_mean - fresh.std_conf_mean).abs() > AUDIT_TOLERANCE
            {
                mismatches.push(format!("aggregate for {} drifted", stored.method));
            }
        }
    }
    let gate = gate_report(&summary.rows);
    if gate.any_passes != summary.gate.any_passes {
        mismatches.push("gate flag drifted".into());
    }
    Ok(AuditReport {
        checked_rows: summary.rows.len(),
        mismatches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_config() -> ExperimentConfig {
        ExperimentConfig::parse(
            "dataset.n = 120\nsplit.train = 80\nsplit.val = 20\nsplit.test = 20\n\
             train.epochs = 2\nseeds = 1,2\nmethods = baseline\nworkers = 2\n",
            &[],
        )
        .unwrap()
    }

    fn temp_out(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("calib-harness-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn empty_method_list_gives_zero_rows() {
        let mut config = fast_config();
        config.methods.clear();
        config.posthoc.clear();
        let out = temp_out("empty");
        let outcome = run(&config, &out).unwrap();
        assert_eq!(outcome.summary.rows.len(), 0);
        assert!(outcome.failures.is_empty());
        assert!(!outcome.summary.gate.any_passes);
    }

    #[test]
    fn single_method_single_seed_counts() {
        let mut config = fast_config();
        config.seeds = vec![5];
        config.posthoc.clear();
        let out = temp_out("single");
        let outcome = run(&config, &out).unwrap();
        assert_eq!(outcome.summary.rows.len(), 1);
        assert_eq!(outcome.summary.rows[0].method, "baseline");
        let paths = RunPaths::new(&out, "default");
        assert!(paths.rows_csv().exists());
        assert!(paths.raw("baseline", 5, "test").exists());
        assert!(paths.trace("baseline", 5).exists());
        assert!(paths.reliability("baseline", 5).exists());
    }

    #[test]
    fn run_audit_round_trip() {
        let config = fast_config();
        let out = temp_out("audit");
        let outcome = run(&config, &out).unwrap();
        assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
        let report = audit(&out, "default").unwrap();
        assert_eq!(report.checked_rows, outcome.summary.rows.len());
        assert!(report.mismatches.is_empty(), "{:?}", report.mismatches);
    }

    #[test]
    fn audit_detects_tampering() {
        let config = fast_config();
        let out = temp_out("tamper");
        run(&config, &out).unwrap();
        let paths = RunPaths::new(&out, "default");
        let raw_path = paths.raw("baseline", 1, "test");
        let text = std::fs::read_to_string(&raw_path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let flipped = if lines[1].ends_with('1') {
            lines[1].replace(",1", ",0")
        } else {
            lines[1].replace(",0", ",1")
        };
        lines[1] = &flipped;
        std::fs::write(&raw_path, lines.join("\n") + "\n").unwrap();
        let report = audit(&out, "default").unwrap();
        assert!(!report.mismatches.is_empty());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let config = fast_config();
        let out_a = temp_out("bytes-a");
        let out_b = temp_out("bytes-b");
        run(&config, &out_a).unwrap();
        run(&config, &out_b).unwrap();
        // Compare every persisted file; rows.csv differs only in the
        // wall-time column, which is masked out.
        let walk = |root: &Path| -> Vec<std::path::PathBuf> {
            let mut files = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(dir) = stack.pop() {
                for entry in std::fs::read_dir(&dir).unwrap() {
                    let path = entry.unwrap().path();
                    if path.is_dir() {
                        stack.push(path);
                    } else {
                        files.push(path);
                    }
                }
            }
            files.sort();
            files
        };
        let files_a = walk(&out_a);
        let files_b = walk(&out_b);
        assert_eq!(files_a.len(), files_b.len());
        for (fa, fb) in files_a.iter().zip(&files_b) {
            assert_eq!(
                fa.strip_prefix(&out_a).unwrap(),
                fb.strip_prefix(&out_b).unwrap()
            );
            let mut ca = std::fs::read_to_string(fa).unwrap();
            let mut cb = std::fs::read_to_string(fb).unwrap();
            if fa.file_name().unwrap() == "rows.csv" {
                ca = mask_last_column(&ca);
                cb = mask_last_column(&cb);
            }
            assert_eq!(ca, cb, "file {} differs across reruns", fa.display());
        }
    }

    fn mask_last_column(csv: &str) -> String {
        csv.lines()
            .map(|line| match line.rfind(',') {
                Some(idx) => &line[..idx],
                None => line,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let mut config = fast_config();
        config.posthoc.clear();
        config.workers = 1;
        let a = run(&config, &temp_out("w1")).unwrap();
        config.workers = 4;
        let b = run(&config, &temp_out("w4")).unwrap();
        assert_eq!(a.summary.rows.len(), b.summary.rows.len());
        for (ra, rb) in a.summary.rows.iter().zip(&b.summary.rows) {
            assert_eq!(ra.method, rb.method);
            assert_eq!(ra.seed, rb.seed);
            assert_eq!(ra.ece.to_bits(), rb.ece.to_bits());
            assert_eq!(ra.mean_conf.to_bits(), rb.mean_conf.to_bits());
        }
    }

    #[test]
    fn info_table_shape() {
        let out = temp_out("info");
        std::fs::create_dir_all(&out).unwrap();
        let rows = analyze_info(6, 1, &out.join("info.csv")).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].k, 1);
        assert_eq!(rows[0].gap_bits, 0.0);
        for row in &rows {
            assert!(row.mi_bits <= 1.0 + 1e-9);
        }
        let k4 = &rows[3];
        assert!(k4.gap_bits >= 1.0, "gap at k=4 is {}", k4.gap_bits);
    }

    #[test]
    fn quadrants_partition_dataset() {
        let ds = make_two_moons(400, 0.25, 4);
        let (train, held) = quadrant_domains(&ds, 1).unwrap();
        assert_eq!(train.len(), 4);
        let total: usize = train.iter().map(|d| d.len()).sum::<usize>()
            + held.iter().map(|d| d.len()).sum::<usize>();
        assert_eq!(total, 400);
    }
}
