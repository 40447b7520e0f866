//! Optimization: Adam with decoupled weight decay, the training regimes
//! (baseline, negative reward, fixed negative reward, Brier + diversity,
//! multi-stage), and the closed-form confidence-collapse iteration.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    brier_diversity, composite_loss, confidence_brier, confidence_target_sse, cosine_anneal,
    cross_entropy, negative_reward_full, negative_reward_simple, NegativeRewardParams,
    DIVERSITY_EPS,
};
use crate::model::{
    forward_eval, forward_train, init_model, register_params, update_running_stats, ModelOutput,
    ModelParams,
};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const STREAM_SHUFFLE: u64 = 0x7_2A18;
const STREAM_DROPOUT: u64 = 0x7_2A19;

/// Training regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Baseline,
    NegReward,
    NegRewardFixed,
    BrierDiversity,
    MultiStage,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::NegReward,
        Method::NegRewardFixed,
        Method::BrierDiversity,
        Method::MultiStage,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::NegReward => "neg_reward",
            Method::NegRewardFixed => "neg_reward_fixed",
            Method::BrierDiversity => "brier_diversity",
            Method::MultiStage => "multi_stage",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == s)
    }

    /// Default weight of the squared-error confidence term. The plain
    /// baseline trains on cross-entropy alone (so a zero-strength penalty
    /// sweep reduces to it exactly); the staged and Brier regimes need the
    /// confidence objective switched on.
    pub fn default_lambda(&self) -> f64 {
        match self {
            Method::Baseline | Method::NegReward | Method::NegRewardFixed => 0.0,
            Method::BrierDiversity | Method::MultiStage => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the squared-error confidence loss in the composite
    /// objective (stage 3 of multi-stage, the Brier branch, and any
    /// baseline variant with confidence supervision).
    pub lambda: f64,
    pub nr: NegativeRewardParams,
    /// Diversity regularizer weight for the Brier branch.
    pub beta: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            lambda: method.default_lambda(),
            nr: NegativeRewardParams::default(),
            beta: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        self.nr.validate().map_err(Error::Config)?;
        Ok(())
    }
}

/// Telemetry for one completed epoch.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_conf: f64,
    pub std_conf: f64,
    /// Confidence spread restricted to correctly classified training
    /// points, the quantity the collapse analysis is about.
    pub std_conf_correct: f64,
    pub train_acc: f64,
    /// 0 for single-stage methods, 1..=3 for multi-stage.
    pub stage: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    /// Epoch indices where a new stage begins (multi-stage only).
    pub stage_boundaries: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub method: Method,
    pub seed: u64,
}

impl TrainedModel {
    pub fn eval(&self, features: &Tensor) -> ModelOutput {
        forward_eval(&self.params, features)
    }

    /// (confidences, correctness flags) on a dataset.
    pub fn conf_correct(&self, ds: &Dataset) -> (Vec<f64>, Vec<bool>) {
        let out = self.eval(&ds.features);
        let preds = out.predictions();
        let correct = preds.iter().zip(&ds.labels).map(|(p, y)| p == y).collect();
        (out.confidences(), correct)
    }
}

/// One Adam step with decoupled weight decay on a single tensor.
/// `t` is the 1-based step count for bias correction. Frozen parameters are
/// handled by the caller simply not invoking this.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: usize,
    lr: f64,
    weight_decay: f64,
) {
    assert!(t >= 1, "adam: step count starts at 1");
    assert_eq!(
        param.shape(),
        grad.shape(),
        "adam: param/grad shape mismatch"
    );
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let (p, g, m, v) = (param.data_mut(), grad.data(), m.data_mut(), v.data_mut());
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * p[i]);
    }
}

/// Moment buffers for the full parameter list.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamState {
    pub fn for_model(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .ordered()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Apply one step over all parameters; `frozen[i]` skips parameter i
    /// entirely (no gradient step, no decay).
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Tensor; 12],
        lr: f64,
        weight_decay: f64,
        frozen: &[bool; 12],
    ) {
        self.t += 1;
        for (i, p) in params.ordered_mut().into_iter().enumerate() {
            if frozen[i] {
                continue;
            }
            adam_step(
                p,
                &grads[i],
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                lr,
                weight_decay,
            );
        }
    }
}

const FROZEN_NONE: [bool; 12] = [false; 12];
/// Stage 2 of multi-stage training: everything except the confidence head.
const FROZEN_ENCODER_AND_PRED: [bool; 12] = [
    true, true, true, true, true, true, true, true, true, true, false, false,
];

/// Per-sample confidence supervision available to the loss assembly.
enum ConfTargets<'a> {
    /// Binary correctness only.
    Binary,
    /// Continuous targets by training-set row index (distillation).
    Continuous(&'a [f64]),
}

/// What the loss assembly produced for one minibatch.
struct BatchLoss {
    loss: f64,
    mean_reward: f64,
}

struct LoopSpec<'a> {
    stage: usize,
    epochs: (usize, usize),
    frozen: [bool; 12],
    targets: ConfTargets<'a>,
}

/// Train a model under the configured method. Seeded minibatch shuffling
/// each epoch, Adam updates, per-epoch telemetry; returns the eval-mode
/// model. Non-finite losses abort with the epoch index.
pub fn train(
    config: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
) -> Result<(TrainedModel, TrainingTrace)> {
    if config.method == Method::MultiStage {
        return train_multi_stage(config, train_ds, val_ds);
    }
    let mut runner = Runner::new(config, train_ds)?;
    let spec = LoopSpec {
        stage: 0,
        epochs: (0, config.epochs),
        frozen: FROZEN_NONE,
        targets: ConfTargets::Binary,
    };
    runner.run_stage(&spec)?;
    Ok(runner.finish())
}

/// Three-stage schedule: classification alone, confidence alone with the
/// encoder and class head frozen, then the joint composite objective. The
/// epoch budget is split in equal thirds (the last stage absorbs the
/// remainder).
pub fn train_multi_stage(
    config: &TrainConfig,
    train_ds: &Dataset,
    _val_ds: &Dataset,
) -> Result<(TrainedModel, TrainingTrace)> {
    let mut runner = Runner::new(config, train_ds)?;
    // Earlier stages take the remainder, so a one-epoch budget is all
    // stage 1 and reduces to plain classification training.
    let e1 = config.epochs.div_ceil(3);
    let e2 = (config.epochs - e1).div_ceil(2);
    let stages = [
        LoopSpec {
            stage: 1,
            epochs: (0, e1),
            frozen: FROZEN_NONE,
            targets: ConfTargets::Binary,
        },
        LoopSpec {
            stage: 2,
            epochs: (e1, e1 + e2),
            frozen: FROZEN_ENCODER_AND_PRED,
            targets: ConfTargets::Binary,
        },
        LoopSpec {
            stage: 3,
            epochs: (e1 + e2, config.epochs),
            frozen: FROZEN_NONE,
            targets: ConfTargets::Binary,
        },
    ];
    runner.trace.stage_boundaries = vec![e1, e1 + e2];
    for spec in &stages {
        runner.run_stage(spec)?;
    }
    Ok(runner.finish())
}

/// Train with continuous confidence targets (one per training row) instead
/// of binary correctness: cross-entropy plus `lambda * (c - target)^2`.
/// With `lambda = 0` this is bit-identical to baseline training under the
/// same seed.
pub fn train_with_conf_targets(
    config: &TrainConfig,
    train_ds: &Dataset,
    targets: &[f64],
) -> Result<(TrainedModel, TrainingTrace)> {
    assert_eq!(
        targets.len(),
        train_ds.len(),
        "one confidence target per training row"
    );
    let mut runner = Runner::new(config, train_ds)?;
    let spec = LoopSpec {
        stage: 0,
        epochs: (0, config.epochs),
        frozen: FROZEN_NONE,
        targets: ConfTargets::Continuous(targets),
    };
    runner.run_stage(&spec)?;
    Ok(runner.finish())
}

/// Continue training from existing parameters (fresh optimizer state) with
/// continuous confidence targets; used for agent fine-tuning.
pub fn resume_with_conf_targets(
    params: ModelParams,
    config: &TrainConfig,
    train_ds: &Dataset,
    targets: &[f64],
) -> Result<(TrainedModel, TrainingTrace)> {
    assert_eq!(
        targets.len(),
        train_ds.len(),
        "one confidence target per training row"
    );
    let mut runner = Runner::new(config, train_ds)?;
    runner.adam = AdamState::for_model(&params);
    runner.params = params;
    let spec = LoopSpec {
        stage: 0,
        epochs: (0, config.epochs),
        frozen: FROZEN_NONE,
        targets: ConfTargets::Continuous(targets),
    };
    runner.run_stage(&spec)?;
    Ok(runner.finish())
}

struct Runner<'d> {
    config: TrainConfig,
    train_ds: &'d Dataset,
    params: ModelParams,
    adam: AdamState,
    shuffle_rng: Rng,
    dropout_rng: Rng,
    trace: TrainingTrace,
    /// Error rate after the first epoch, the reference for adaptive
    /// penalty scaling.
    initial_error_rate: Option<f64>,
    /// Error rate after the most recent epoch.
    last_error_rate: Option<f64>,
}

impl<'d> Runner<'d> {
    fn new(config: &TrainConfig, train_ds: &'d Dataset) -> Result<Self> {
        config.validate()?;
        if train_ds.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let k = train_ds.num_classes().max(2);
        let params = init_model(train_ds.num_features(), k, config.seed);
        let adam = AdamState::for_model(&params);
        Ok(Runner {
            config: config.clone(),
            train_ds,
            params,
            adam,
            shuffle_rng: Rng::substream(config.seed, STREAM_SHUFFLE),
            dropout_rng: Rng::substream(config.seed, STREAM_DROPOUT),
            trace: TrainingTrace::default(),
            initial_error_rate: None,
            last_error_rate: None,
        })
    }

    fn run_stage(&mut self, spec: &LoopSpec) -> Result<()> {
        let n = self.train_ds.len();
        for epoch in spec.epochs.0..spec.epochs.1 {
            let mut order: Vec<usize> = (0..n).collect();
            self.shuffle_rng.shuffle(&mut order);

            let mut loss_sum = 0.0;
            let mut reward_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(self.config.batch_size) {
                if chunk.len() < 2 {
                    // A trailing single row cannot be batch-normalized.
                    continue;
                }
                let batch = self.step_batch(chunk, spec, epoch)?;
                if !batch.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        message: format!(
                            "loss {} on method {}",
                            batch.loss,
                            self.config.method.name()
                        ),
                    });
                }
                loss_sum += batch.loss;
                reward_sum += batch.mean_reward;
                batches += 1;
            }

            let stats = self.epoch_eval();
            // Exploded parameters can launder NaNs through the log clamp
            // into a finite loss; the telemetry pass still exposes them.
            if !(stats.mean_conf.is_finite() && stats.std_conf.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    message: format!(
                        "non-finite confidence telemetry on method {}",
                        self.config.method.name()
                    ),
                });
            }
            self.last_error_rate = Some(1.0 - stats.train_acc);
            if self.initial_error_rate.is_none() {
                self.initial_error_rate = Some((1.0 - stats.train_acc).max(1e-3));
            }
            self.trace.epochs.push(EpochRecord {
                epoch,
                loss: loss_sum / batches.max(1) as f64,
                mean_reward: reward_sum / batches.max(1) as f64,
                mean_conf: stats.mean_conf,
                std_conf: stats.std_conf,
                std_conf_correct: stats.std_conf_correct,
                train_acc: stats.train_acc,
                stage: spec.stage,
            });
        }
        Ok(())
    }

    fn step_batch(
        &mut self,
        indices: &[usize],
        spec: &LoopSpec,
        epoch: usize,
    ) -> Result<BatchLoss> {
        let features = self.train_ds.features.gather_rows(indices);
        let labels: Vec<usize> = indices.iter().map(|&i| self.train_ds.labels[i]).collect();

        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &self.params);
        let batch = tape.constant(features);
        let fwd = forward_train(&mut tape, &vars, &self.params, batch, &mut self.dropout_rng);

        let correct: Vec<bool> = {
            let probs = tape.value(fwd.class_probs);
            (0..labels.len())
                .map(|i| crate::model::argmax(probs.row(i)) == labels[i])
                .collect()
        };

        let ce = cross_entropy(&mut tape, fwd.class_probs, &labels);
        let mut mean_reward = 0.0;
        let loss_var = match (&spec.targets, self.config.method, spec.stage) {
            (ConfTargets::Continuous(all_targets), _, _) => {
                let batch_targets: Vec<f64> = indices.iter().map(|&i| all_targets[i]).collect();
                let sse = confidence_target_sse(&mut tape, fwd.confidence, &batch_targets);
                composite_loss(&mut tape, ce, sse, self.config.lambda)
            }
            (_, Method::Baseline, _) => {
                if self.config.lambda > 0.0 {
                    let conf_loss = confidence_brier(&mut tape, fwd.confidence, &correct);
                    composite_loss(&mut tape, ce, conf_loss, self.config.lambda)
                } else {
                    ce
                }
            }
            (_, Method::NegReward, _) => {
                let (rewards, term) =
                    negative_reward_simple(&mut tape, fwd.confidence, &correct, &self.config.nr);
                mean_reward = tape.value(rewards).data().iter().sum::<f64>()
                    / tape.value(rewards).numel() as f64;
                tape.add(ce, term)
            }
            (_, Method::NegRewardFixed, _) => {
                // Penalty strength follows a cosine schedule down to 10% of
                // its configured value; the wrong-case weight scales with
                // the ratio of the current to the initial error rate.
                let alpha_t = cosine_anneal(
                    epoch,
                    self.config.epochs.max(1),
                    self.config.nr.alpha,
                    0.1 * self.config.nr.alpha,
                );
                let mut nr = self.config.nr;
                if let (Some(init), Some(last)) = (self.initial_error_rate, self.last_error_rate) {
                    let scale = (last / init).clamp(0.0, 10.0);
                    nr.lambda2 *= scale;
                }
                let u = uncertainty_var(&mut tape, fwd.confidence);
                let mean_r = negative_reward_full(
                    &mut tape,
                    &labels,
                    fwd.class_probs,
                    fwd.confidence,
                    u,
                    &nr,
                );
                mean_reward = tape.value(mean_r).item();
                let term = tape.mul_scalar(mean_r, -alpha_t);
                tape.add(ce, term)
            }
            (_, Method::BrierDiversity, _) => {
                let conf_loss = brier_diversity(
                    &mut tape,
                    fwd.confidence,
                    &correct,
                    self.config.beta,
                    DIVERSITY_EPS,
                );
                composite_loss(&mut tape, ce, conf_loss, self.config.lambda)
            }
            (_, Method::MultiStage, stage) => match stage {
                1 => ce,
                2 => confidence_brier(&mut tape, fwd.confidence, &correct),
                _ => {
                    let conf_loss = confidence_brier(&mut tape, fwd.confidence, &correct);
                    composite_loss(&mut tape, ce, conf_loss, self.config.lambda)
                }
            },
        };

        let loss = tape.value(loss_var).item();
        let grads_map = tape.backward(loss_var);
        let ordered = vars.ordered();
        let grads: [Tensor; 12] = std::array::from_fn(|i| grads_map.get(ordered[i]).clone());
        self.adam.step(
            &mut self.params,
            &grads,
            self.config.lr,
            self.config.weight_decay,
            &spec.frozen,
        );
        update_running_stats(&mut self.params, &fwd);

        Ok(BatchLoss { loss, mean_reward })
    }

    fn epoch_eval(&self) -> EpochStats {
        let out = forward_eval(&self.params, &self.train_ds.features);
        let conf = out.confidences();
        let preds = out.predictions();
        let correct: Vec<bool> = preds
            .iter()
            .zip(&self.train_ds.labels)
            .map(|(p, y)| p == y)
            .collect();
        let acc = correct.iter().filter(|&&k| k).count() as f64 / self.train_ds.len() as f64;
        let conf_correct: Vec<f64> = conf
            .iter()
            .zip(&correct)
            .filter(|(_, &k)| k)
            .map(|(&c, _)| c)
            .collect();
        let std_conf_correct = if conf_correct.len() >= 2 {
            crate::metrics::population_std(&conf_correct)
        } else {
            0.0
        };
        EpochStats {
            mean_conf: conf.iter().sum::<f64>() / conf.len() as f64,
            std_conf: crate::metrics::population_std(&conf),
            std_conf_correct,
            train_acc: acc,
        }
    }

    fn finish(self) -> (TrainedModel, TrainingTrace) {
        (
            TrainedModel {
                params: self.params,
                method: self.config.method,
                seed: self.config.seed,
            },
            self.trace,
        )
    }
}

struct EpochStats {
    mean_conf: f64,
    std_conf: f64,
    std_conf_correct: f64,
    train_acc: f64,
}

fn uncertainty_var(tape: &mut Tape, conf: crate::tape::Var) -> crate::tape::Var {
    let n = tape.value(conf).rows();
    let ones = tape.constant(Tensor::column(vec![1.0; n]));
    tape.sub(ones, conf)
}

/// The scalar-confidence gradient iteration c <- c - eta_lambda * (c - 1)
/// applied to a vector of starting confidences, returning the absolute
/// pairwise gaps |c_t(a) - c_t(b)| at every step (step 0 included). The
/// gaps contract exactly by (1 - eta_lambda) per step.
pub fn variance_collapse_sim(c0: &[f64], eta_lambda: f64, steps: usize) -> Vec<Vec<f64>> {
    assert!(
        eta_lambda > 0.0 && eta_lambda < 2.0,
        "collapse sim: eta_lambda {eta_lambda} outside (0, 2)"
    );
    assert!(
        c0.iter().all(|&c| c > 0.0 && c < 1.0),
        "collapse sim: c0 outside (0, 1)"
    );
    let mut c = c0.to_vec();
    let pair_gaps = |c: &[f64]| {
        let mut gaps = Vec::new();
        for i in 0..c.len() {
            for j in (i + 1)..c.len() {
                gaps.push((c[i] - c[j]).abs());
            }
        }
        gaps
    };
    let mut trajectory = vec![pair_gaps(&c)];
    for _ in 0..steps {
        for ci in c.iter_mut() {
            *ci -= eta_lambda * (*ci - 1.0);
        }
        trajectory.push(pair_gaps(&c));
    }
    trajectory
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_two_moons;

    fn tiny_moons() -> (Dataset, Dataset) {
        let ds = make_two_moons(80, 0.2, 5);
        let (train, val, _) = crate::data::split(&ds, (60, 20, 0), 5);
        (train, val)
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let mut m = Tensor::zeros(vec![3]);
        let mut v = Tensor::zeros(vec![3]);
        adam_step(&mut p, &g, &mut m, &mut v, 1, 1e-3, 0.0);
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_descends_quadratic() {
        // f(w) = w^2, gradient 2w at w = 1: one step moves toward zero.
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        let mut m = Tensor::zeros(vec![]);
        let mut v = Tensor::zeros(vec![]);
        adam_step(&mut p, &g, &mut m, &mut v, 1, 1e-2, 0.0);
        assert!(p.item() < 1.0);
    }

    #[test]
    fn adam_deterministic() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3, -0.4]);
            let mut m = Tensor::zeros(vec![2]);
            let mut v = Tensor::zeros(vec![2]);
            for t in 1..=25 {
                let g = Tensor::vector(vec![p.data()[0] * 2.0, p.data()[1].cos()]);
                adam_step(&mut p, &g, &mut m, &mut v, t, 1e-2, 1e-4);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn one_epoch_smoke_run() {
        let (train_ds, val) = tiny_moons();
        let mut config = TrainConfig::new(Method::Baseline, 1);
        config.epochs = 1;
        let (model, trace) = train(&config, &train_ds, &val).unwrap();
        assert_eq!(trace.epochs.len(), 1);
        assert!(trace.epochs[0].loss.is_finite());
        assert_eq!(model.params.num_classes, 2);
    }

    #[test]
    fn zero_epochs_rejected() {
        let (train_ds, val) = tiny_moons();
        let mut config = TrainConfig::new(Method::Baseline, 1);
        config.epochs = 0;
        assert!(matches!(
            train_fn_guard(&config, &train_ds, &val),
            Err(Error::Config(_))
        ));
    }

    fn train_fn_guard(
        c: &TrainConfig,
        tr: &Dataset,
        va: &Dataset,
    ) -> Result<(TrainedModel, TrainingTrace)> {
        train(c, tr, va)
    }

    #[test]
    fn divergence_reports_epoch() {
        let (train_ds, val) = tiny_moons();
        let mut config = TrainConfig::new(Method::Baseline, 1);
        config.epochs = 3;
        config.lr = 1e300; // parameters explode immediately
        match train(&config, &train_ds, &val) {
            Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (train_ds, val) = tiny_moons();
        let mut config = TrainConfig::new(Method::NegReward, 7);
        config.epochs = 3;
        let (m1, t1) = train(&config, &train_ds, &val).unwrap();
        let (m2, t2) = train(&config, &train_ds, &val).unwrap();
        assert_eq!(m1.params, m2.params);
        assert_eq!(t1.epochs.len(), t2.epochs.len());
        for (a, b) in t1.epochs.iter().zip(&t2.epochs) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.mean_conf.to_bits(), b.mean_conf.to_bits());
        }
    }

    #[test]
    fn multi_stage_one_epoch_budget_is_baseline() {
        let (train_ds, val) = tiny_moons();
        let mut staged = TrainConfig::new(Method::MultiStage, 13);
        staged.epochs = 1;
        let (staged_model, trace) = train(&staged, &train_ds, &val).unwrap();
        assert_eq!(trace.epochs.len(), 1);
        assert_eq!(trace.epochs[0].stage, 1);
        let mut plain = TrainConfig::new(Method::Baseline, 13);
        plain.epochs = 1;
        plain.lambda = 0.0;
        let (baseline_model, _) = train(&plain, &train_ds, &val).unwrap();
        assert_eq!(staged_model.params, baseline_model.params);
    }

    #[test]
    fn multi_stage_records_boundaries() {
        let (train_ds, val) = tiny_moons();
        let mut config = TrainConfig::new(Method::MultiStage, 3);
        config.epochs = 9;
        let (_, trace) = train(&config, &train_ds, &val).unwrap();
        assert_eq!(trace.stage_boundaries, vec![3, 6]);
        assert_eq!(trace.epochs.len(), 9);
        assert!(trace.epochs[..3].iter().all(|r| r.stage == 1));
        assert!(trace.epochs[3..6].iter().all(|r| r.stage == 2));
        assert!(trace.epochs[6..].iter().all(|r| r.stage == 3));
    }

    #[test]
    fn multi_stage_stage2_freezes_encoder_and_pred() {
        let (train_ds, val) = tiny_moons();
        let mut config = TrainConfig::new(Method::MultiStage, 11);
        config.epochs = 6; // stages of 2 epochs each
                           // Train stages 1+2 manually to compare parameter movement.
        let mut runner = Runner::new(&config, &train_ds).unwrap();
        runner
            .run_stage(&LoopSpec {
                stage: 1,
                epochs: (0, 2),
                frozen: FROZEN_NONE,
                targets: ConfTargets::Binary,
            })
            .unwrap();
        let after_stage1 = runner.params.clone();
        runner
            .run_stage(&LoopSpec {
                stage: 2,
                epochs: (2, 4),
                frozen: FROZEN_ENCODER_AND_PRED,
                targets: ConfTargets::Binary,
            })
            .unwrap();
        let after_stage2 = runner.params.clone();
        assert_eq!(
            after_stage1.w1, after_stage2.w1,
            "encoder must not move in stage 2"
        );
        assert_eq!(
            after_stage1.w_pred, after_stage2.w_pred,
            "class head must not move in stage 2"
        );
        assert_ne!(
            after_stage1.w_conf, after_stage2.w_conf,
            "confidence head must move in stage 2"
        );
        let _ = val;
    }

    #[test]
    fn collapse_sim_matches_closed_form() {
        let c0 = vec![0.2, 0.5, 0.9];
        let eta_lambda = 0.1;
        let steps = 100;
        let trajectory = variance_collapse_sim(&c0, eta_lambda, steps);
        for (t, gaps) in trajectory.iter().enumerate() {
            let factor = (1.0 - eta_lambda).powi(t as i32);
            let mut idx = 0;
            for i in 0..c0.len() {
                for j in (i + 1)..c0.len() {
                    let expected = factor * (c0[i] - c0[j]).abs();
                    assert!(
                        (gaps[idx] - expected).abs() < 1e-12,
                        "step {t} pair {idx}: {} vs {expected}",
                        gaps[idx]
                    );
                    idx += 1;
                }
            }
        }
        // Specific check: 0.3 * 0.9^100.
        let single = variance_collapse_sim(&[0.2, 0.5], 0.1, 100);
        let expected = 0.3 * 0.9f64.powi(100);
        assert!((single[100][0] - expected).abs() < 1e-12);
    }

    #[test]
    fn collapse_sim_unit_rate_collapses_in_one_step() {
        let trajectory = variance_collapse_sim(&[0.1, 0.7], 1.0, 2);
        assert!((trajectory[0][0] - 0.6).abs() < 1e-15);
        assert_eq!(trajectory[1][0], 0.0);
        assert_eq!(trajectory[2][0], 0.0);
    }

    #[test]
    fn assembled_losses_grad_check_on_frozen_minibatch() {
        // Gradient of each method's assembled loss against central
        // differences, at a fixed minibatch and a fixed dropout stream.
        use crate::tape::grad_check;
        let ds = make_two_moons(16, 0.25, 9);
        let params = init_model(2, 2, 31);
        let tensors: Vec<Tensor> = params.ordered().iter().map(|t| (*t).clone()).collect();
        let labels = ds.labels.clone();
        let features = ds.features.clone();

        for method in [Method::Baseline, Method::NegReward, Method::BrierDiversity] {
            let params = params.clone();
            let labels = labels.clone();
            let features = features.clone();
            let build = move |tape: &mut Tape, vs: &[crate::tape::Var]| {
                let pv = crate::model::ParamVars {
                    w1: vs[0],
                    b1: vs[1],
                    g1: vs[2],
                    be1: vs[3],
                    w2: vs[4],
                    b2: vs[5],
                    g2: vs[6],
                    be2: vs[7],
                    w_pred: vs[8],
                    b_pred: vs[9],
                    w_conf: vs[10],
                    b_conf: vs[11],
                };
                let batch = tape.constant(features.clone());
                let mut rng = Rng::new(77);
                let fwd = forward_train(tape, &pv, &params, batch, &mut rng);
                let correct: Vec<bool> = {
                    let probs = tape.value(fwd.class_probs);
                    (0..labels.len())
                        .map(|i| crate::model::argmax(probs.row(i)) == labels[i])
                        .collect()
                };
                let ce = cross_entropy(tape, fwd.class_probs, &labels);
                let loss = match method {
                    Method::Baseline => {
                        let brier = confidence_brier(tape, fwd.confidence, &correct);
                        composite_loss(tape, ce, brier, 1.0)
                    }
                    Method::NegReward => {
                        let (_, term) = negative_reward_simple(
                            tape,
                            fwd.confidence,
                            &correct,
                            &NegativeRewardParams::default(),
                        );
                        tape.add(ce, term)
                    }
                    _ => {
                        let bd =
                            brier_diversity(tape, fwd.confidence, &correct, 0.1, DIVERSITY_EPS);
                        composite_loss(tape, ce, bd, 1.0)
                    }
                };
                crate::tape::anchor_leaves(tape, vs, loss)
            };
            let err = grad_check(build, &tensors, 1e-5);
            assert!(err < 1e-4, "{}: relative error {err}", method.name());
        }
    }
}
