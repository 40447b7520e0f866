//! Experiment configuration: a flat key-value text format with dotted
//! section names. Every key can also arrive as a `--section.key=value`
//! command-line override; unknown keys are config errors.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment; blank
//! lines ignored. Values are plain scalars or comma-separated lists.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::LabelColumn;
use crate::error::{Error, Result};
use crate::losses::NegativeRewardParams;
use crate::train::{Method, TrainConfig};

/// Default training seeds: the documented base seed plus four successors
/// for five-way averaging.
pub const DEFAULT_SEEDS: [u64; 5] = [42, 43, 44, 45, 46];
pub const DEFAULT_EPOCHS: usize = 30;

const KNOWN_KEYS: &[&str] = &[
    "run.name",
    "dataset.kind",
    "dataset.n",
    "dataset.noise",
    "dataset.seed",
    "dataset.csv_path",
    "dataset.label_column",
    "split.train",
    "split.val",
    "split.test",
    "split.seed",
    "methods",
    "posthoc",
    "posthoc.base_method",
    "seeds",
    "workers",
    "metrics.n_bins",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.lambda",
    "train.beta",
    "nr.lambda1",
    "nr.lambda2",
    "nr.kappa1",
    "nr.kappa2",
    "nr.mu1",
    "nr.mu2",
    "nr.alpha",
    "nr.certain_threshold",
    "sweep.alphas",
    "ensemble.members",
    "ensemble.lambda",
    "ensemble.epochs",
    "multiagent.agents",
    "multiagent.rounds",
    "multiagent.source",
    "multiagent.target",
    "info.kmax",
    "info.n",
];

/// Per-method override suffixes (prefix is the method name).
const METHOD_OVERRIDE_FIELDS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "lambda",
    "beta",
    "alpha",
];

fn key_is_known(key: &str) -> bool {
    if KNOWN_KEYS.contains(&key) {
        return true;
    }
    if let Some((prefix, field)) = key.split_once('.') {
        if Method::parse(prefix).is_some() && METHOD_OVERRIDE_FIELDS.contains(&field) {
            return true;
        }
    }
    false
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    TwoMoons,
    Csv,
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub dataset_kind: DatasetKind,
    pub dataset_n: usize,
    pub dataset_noise: f64,
    pub dataset_seed: u64,
    pub csv_path: Option<PathBuf>,
    pub label_column: LabelColumn,
    pub split_sizes: (usize, usize, usize),
    pub split_seed: u64,
    pub methods: Vec<Method>,
    pub posthoc: Vec<String>,
    /// Training method of the run the post-hoc comparison calibrates.
    pub posthoc_base_method: Method,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub n_bins: usize,
    pub sweep_alphas: Vec<f64>,
    pub ensemble_members: usize,
    pub ensemble_lambda: f64,
    /// Member and student training budget; disagreement needs members
    /// trained long enough to diverge on ambiguous regions.
    pub ensemble_epochs: usize,
    pub multiagent_agents: usize,
    pub multiagent_rounds: usize,
    pub multiagent_source: usize,
    pub multiagent_target: usize,
    pub info_kmax: usize,
    pub info_n: usize,
    /// Raw resolved key-value map (defaults merged with overrides), the
    /// source for per-method training configs and the canonical copy.
    raw: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn default_config() -> Self {
        Self::from_pairs(BTreeMap::new()).expect("defaults are valid")
    }

    /// Parse config text, then apply `key=value` overrides (later wins).
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for (k, v) in overrides {
            if !key_is_known(k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            pairs.insert(k.clone(), v.clone());
        }
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        Self::parse(&text, overrides)
    }

    fn from_pairs(pairs: BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| pairs.get(key).map(String::as_str);
        let run_name = get("run.name").unwrap_or("default").to_string();
        if run_name.is_empty()
            || !run_name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::Config(format!(
                "run.name {run_name:?} must be nonempty alphanumeric/dash/underscore"
            )));
        }

        let dataset_kind = match get("dataset.kind").unwrap_or("two_moons") {
            "two_moons" => DatasetKind::TwoMoons,
            "csv" => DatasetKind::Csv,
            other => {
                return Err(Error::Config(format!(
                    "dataset.kind {other:?} not recognized"
                )))
            }
        };
        let csv_path = get("dataset.csv_path").map(PathBuf::from);
        if dataset_kind == DatasetKind::Csv && csv_path.is_none() {
            return Err(Error::Config(
                "dataset.kind = csv requires dataset.csv_path".into(),
            ));
        }
        let label_column = match get("dataset.label_column").unwrap_or("label") {
            s if s.chars().all(|c| c.is_ascii_digit()) && !s.is_empty() => {
                LabelColumn::Index(parse_scalar(s, "dataset.label_column")?)
            }
            s => LabelColumn::Name(s.to_string()),
        };

        let methods = match get("methods") {
            None => Method::ALL.to_vec(),
            Some(list) => {
                let mut methods = Vec::new();
                for name in split_list(list) {
                    let m = Method::parse(&name)
                        .ok_or_else(|| Error::Config(format!("unknown method {name:?}")))?;
                    if !methods.contains(&m) {
                        methods.push(m);
                    }
                }
                methods
            }
        };

        let posthoc = match get("posthoc") {
            None => vec!["temperature".into(), "platt".into(), "isotonic".into()],
            Some(list) => {
                let names = split_list(list);
                for name in &names {
                    if !["temperature", "platt", "isotonic"].contains(&name.as_str()) {
                        return Err(Error::Config(format!("unknown posthoc method {name:?}")));
                    }
                }
                names
            }
        };

        let seeds: Vec<u64> = match get("seeds") {
            None => DEFAULT_SEEDS.to_vec(),
            Some(list) => {
                let parsed: Result<Vec<u64>> = split_list(list)
                    .iter()
                    .map(|s| parse_scalar(s, "seeds"))
                    .collect();
                let seeds = parsed?;
                if seeds.is_empty() {
                    return Err(Error::Config("seeds must be nonempty".into()));
                }
                seeds
            }
        };

        let sweep_alphas: Vec<f64> = match get("sweep.alphas") {
            None => vec![0.0, 0.1, 0.5, 1.0],
            Some(list) => {
                let parsed: Result<Vec<f64>> = split_list(list)
                    .iter()
                    .map(|s| parse_scalar(s, "sweep.alphas"))
                    .collect();
                parsed?
            }
        };

        let config = ExperimentConfig {
            run_name,
            dataset_kind,
            dataset_n: opt(&pairs, "dataset.n", 1900)?,
            dataset_noise: opt(&pairs, "dataset.noise", 0.25)?,
            dataset_seed: opt(&pairs, "dataset.seed", 42)?,
            csv_path,
            label_column,
            split_sizes: (
                opt(&pairs, "split.train", 1050)?,
                opt(&pairs, "split.val", 400)?,
                opt(&pairs, "split.test", 450)?,
            ),
            split_seed: opt(&pairs, "split.seed", 42)?,
            methods,
            posthoc,
            posthoc_base_method: match get("posthoc.base_method") {
                None => Method::NegReward,
                Some(name) => Method::parse(name).ok_or_else(|| {
                    Error::Config(format!("unknown posthoc.base_method {name:?}"))
                })?,
            },
            seeds,
            workers: opt(&pairs, "workers", 4)?,
            n_bins: opt(&pairs, "metrics.n_bins", crate::metrics::DEFAULT_N_BINS)?,
            sweep_alphas,
            ensemble_members: opt(&pairs, "ensemble.members", 5)?,
            ensemble_lambda: opt(&pairs, "ensemble.lambda", 2.0)?,
            ensemble_epochs: opt(&pairs, "ensemble.epochs", 60)?,
            multiagent_agents: opt(&pairs, "multiagent.agents", 4)?,
            multiagent_rounds: opt(&pairs, "multiagent.rounds", 1)?,
            multiagent_source: opt(&pairs, "multiagent.source", 0)?,
            multiagent_target: opt(&pairs, "multiagent.target", 1)?,
            info_kmax: opt(&pairs, "info.kmax", 16)?,
            info_n: opt(&pairs, "info.n", 1)?,
            raw: pairs,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.n_bins == 0 || self.n_bins > 1_000_000 {
            return Err(Error::Config(
                "metrics.n_bins must be in 1..=1000000".into(),
            ));
        }
        let total = self
            .split_sizes
            .0
            .checked_add(self.split_sizes.1)
            .and_then(|t| t.checked_add(self.split_sizes.2))
            .ok_or_else(|| Error::Config("split sizes overflow".into()))?;
        if self.dataset_kind == DatasetKind::TwoMoons && total > self.dataset_n {
            return Err(Error::Config(format!(
                "split sizes {:?} oversubscribe dataset.n {}",
                self.split_sizes, self.dataset_n
            )));
        }
        if self.ensemble_members < 2 {
            return Err(Error::Config("ensemble.members must be >= 2".into()));
        }
        if self.multiagent_agents < 2 {
            return Err(Error::Config("multiagent.agents must be >= 2".into()));
        }
        if self.info_kmax < 2 {
            return Err(Error::Config("info.kmax must be >= 2".into()));
        }
        // Surface bad train values now rather than mid-run.
        for method in &self.methods {
            self.train_config(*method, self.seeds[0])?.validate()?;
        }
        Ok(())
    }

    /// Training configuration for a method and seed: global `train.*` keys,
    /// method defaults for lambda, then `<method>.<field>` overrides.
    pub fn train_config(&self, method: Method, seed: u64) -> Result<TrainConfig> {
        let mut tc = TrainConfig::new(method, seed);
        tc.epochs = self.train_key(method, "epochs", DEFAULT_EPOCHS)?;
        tc.batch_size = self.train_key(method, "batch_size", 32)?;
        tc.lr = self.train_key(method, "lr", 1e-3)?;
        tc.weight_decay = self.train_key(method, "weight_decay", 1e-4)?;
        tc.lambda = self.train_key(method, "lambda", method.default_lambda())?;
        tc.beta = self.train_key(method, "beta", 0.01)?;
        tc.nr = self.reward_params(method)?;
        Ok(tc)
    }

    fn reward_params(&self, method: Method) -> Result<NegativeRewardParams> {
        let d = NegativeRewardParams::default();
        Ok(NegativeRewardParams {
            lambda1: self.scalar_key("nr.lambda1", d.lambda1)?,
            lambda2: self.scalar_key("nr.lambda2", d.lambda2)?,
            kappa1: self.scalar_key("nr.kappa1", d.kappa1)?,
            kappa2: self.scalar_key("nr.kappa2", d.kappa2)?,
            mu1: self.scalar_key("nr.mu1", d.mu1)?,
            mu2: self.scalar_key("nr.mu2", d.mu2)?,
            alpha: self.train_key(method, "alpha", self.scalar_key("nr.alpha", d.alpha)?)?,
            certain_threshold: self.scalar_key("nr.certain_threshold", d.certain_threshold)?,
        })
    }

    /// `<method>.<field>` override, else `train.<field>`, else the default.
    fn train_key<T: std::str::FromStr>(
        &self,
        method: Method,
        field: &str,
        default: T,
    ) -> Result<T> {
        let method_key = format!("{}.{field}", method.name());
        if let Some(v) = self.raw.get(&method_key) {
            return parse_scalar(v, &method_key);
        }
        let train_key = format!("train.{field}");
        if field != "alpha" {
            if let Some(v) = self.raw.get(&train_key) {
                return parse_scalar(v, &train_key);
            }
        }
        Ok(default)
    }

    fn scalar_key<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw.get(key) {
            Some(v) => parse_scalar(v, key),
            None => Ok(default),
        }
    }

    /// Canonical text form: every resolved key sorted, one per line. Stable
    /// across runs of the same configuration.
    pub fn canonical_text(&self) -> String {
        let mut pairs = self.raw.clone();
        let defaults: &[(&str, String)] = &[
            ("run.name", self.run_name.clone()),
            (
                "dataset.kind",
                match self.dataset_kind {
                    DatasetKind::TwoMoons => "two_moons".into(),
                    DatasetKind::Csv => "csv".into(),
                },
            ),
            ("dataset.n", self.dataset_n.to_string()),
            ("dataset.noise", self.dataset_noise.to_string()),
            ("dataset.seed", self.dataset_seed.to_string()),
            ("split.train", self.split_sizes.0.to_string()),
            ("split.val", self.split_sizes.1.to_string()),
            ("split.test", self.split_sizes.2.to_string()),
            ("split.seed", self.split_seed.to_string()),
            (
                "methods",
                self.methods
                    .iter()
                    .map(|m| m.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("posthoc", self.posthoc.join(",")),
            (
                "posthoc.base_method",
                self.posthoc_base_method.name().to_string(),
            ),
            (
                "seeds",
                self.seeds
                    .iter()
                    .map(u64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("workers", self.workers.to_string()),
            ("metrics.n_bins", self.n_bins.to_string()),
            (
                "train.epochs",
                self.train_key(Method::Baseline, "epochs", DEFAULT_EPOCHS)
                    .unwrap_or(DEFAULT_EPOCHS)
                    .to_string(),
            ),
            (
                "sweep.alphas",
                self.sweep_alphas
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("ensemble.members", self.ensemble_members.to_string()),
            ("ensemble.lambda", self.ensemble_lambda.to_string()),
            ("ensemble.epochs", self.ensemble_epochs.to_string()),
            ("multiagent.agents", self.multiagent_agents.to_string()),
            ("info.kmax", self.info_kmax.to_string()),
            ("info.n", self.info_n.to_string()),
        ];
        // Resolved values are canonical; they overwrite whatever spelling
        // the source text used (whitespace in lists and the like).
        for (k, v) in defaults {
            pairs.insert(k.to_string(), v.clone());
        }
        let mut out = String::new();
        for (k, v) in &pairs {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (line_no, raw_line) in text.lines().enumerate() {
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got {raw_line:?}",
                line_no + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !key_is_known(&key) {
            return Err(Error::Config(format!(
                "line {}: unknown config key {key:?}",
                line_no + 1
            )));
        }
        pairs.insert(key, value);
    }
    Ok(pairs)
}

fn split_list(list: &str) -> Vec<String> {
    list.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse value {value:?}")))
}

fn opt<T: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match pairs.get(key) {
        Some(v) => parse_scalar(v, key),
        None => Ok(default),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = ExperimentConfig::default_config();
        assert_eq!(c.run_name, "default");
        assert_eq!(c.seeds, DEFAULT_SEEDS.to_vec());
        assert_eq!(c.methods.len(), 5);
        assert_eq!(c.split_sizes, (1050, 400, 450));
        assert_eq!(c.sweep_alphas, vec![0.0, 0.1, 0.5, 1.0]);
    }

    #[test]
    fn parse_and_override() {
        let text = "train.epochs = 10\nseeds = 1,2\nmethods = baseline, neg_reward # comment\n";
        let c = ExperimentConfig::parse(
            text,
            &[
                ("train.lr".into(), "0.01".into()),
                ("seeds".into(), "7".into()),
            ],
        )
        .unwrap();
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.methods, vec![Method::Baseline, Method::NegReward]);
        let tc = c.train_config(Method::Baseline, 7).unwrap();
        assert_eq!(tc.epochs, 10);
        assert_eq!(tc.lr, 0.01);
    }

    #[test]
    fn per_method_overrides_beat_train_section() {
        let text = "train.lambda = 0.5\nmulti_stage.lambda = 2.0\nneg_reward.alpha = 0.25\n";
        let c = ExperimentConfig::parse(text, &[]).unwrap();
        assert_eq!(c.train_config(Method::Baseline, 1).unwrap().lambda, 0.5);
        assert_eq!(c.train_config(Method::MultiStage, 1).unwrap().lambda, 2.0);
        assert_eq!(c.train_config(Method::NegReward, 1).unwrap().nr.alpha, 0.25);
        assert_eq!(c.train_config(Method::Baseline, 1).unwrap().nr.alpha, 1.0);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            ExperimentConfig::parse("nope.nope = 1\n", &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("", &[("bogus".into(), "1".into())]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ExperimentConfig::parse("train.epochs = banana\n", &[])
            .unwrap_err()
            .to_string()
            .contains("train.epochs"));
        assert!(ExperimentConfig::parse("methods = warp_drive\n", &[]).is_err());
        assert!(ExperimentConfig::parse("split.train = 5000\n", &[]).is_err());
        assert!(ExperimentConfig::parse("dataset.kind = csv\n", &[]).is_err());
    }

    #[test]
    fn canonical_text_stable() {
        let c1 = ExperimentConfig::parse("train.epochs = 10\nseeds = 3,4\n", &[]).unwrap();
        let c2 = ExperimentConfig::parse("seeds = 3, 4\ntrain.epochs=10\n", &[]).unwrap();
        assert_eq!(c1.canonical_text(), c2.canonical_text());
        // Reparsing the canonical text yields the same config.
        let c3 = ExperimentConfig::parse(&c1.canonical_text(), &[]).unwrap();
        assert_eq!(c3.canonical_text(), c1.canonical_text());
    }
}
