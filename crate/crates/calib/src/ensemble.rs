//! Ensemble disagreement as a continuous confidence signal, student
//! distillation, and the lightweight multi-agent confidence round.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::population_std;
use crate::model::forward_eval;
use crate::tensor::Tensor;
use crate::train::{
    train, train_with_conf_targets, Method, TrainConfig, TrainedModel, TrainingTrace,
};

/// Floor for the dataset-level maximum disagreement, guarding the
/// normalization against degenerate (identical-member) ensembles.
pub const SIGMA_MAX_FLOOR: f64 = 1e-6;

pub struct Ensemble {
    pub members: Vec<TrainedModel>,
    pub seeds: Vec<u64>,
    /// Maximum member-probability variance over the training inputs.
    pub sigma_max: f64,
}

/// Train `m` members with consecutive seeds and identical configuration,
/// then record the training-set maximum disagreement for normalization.
pub fn train_ensemble(m: usize, config: &TrainConfig, data: &Dataset) -> Result<Ensemble> {
    assert!(m >= 2, "ensemble: needs at least 2 members, got {m}");
    let mut members = Vec::with_capacity(m);
    let mut seeds = Vec::with_capacity(m);
    for i in 0..m {
        let mut member_config = config.clone();
        member_config.seed = config.seed + i as u64;
        let (model, _) = train(&member_config, data, data).map_err(|e| match e {
            Error::Diverged { epoch, message } => Error::Diverged {
                epoch,
                message: format!("ensemble member {i}: {message}"),
            },
            other => other,
        })?;
        seeds.push(member_config.seed);
        members.push(model);
    }
    let mut ensemble = Ensemble {
        members,
        seeds,
        sigma_max: SIGMA_MAX_FLOOR,
    };
    let variances = ensemble.member_variances(&data.features);
    ensemble.sigma_max = variances.iter().cloned().fold(SIGMA_MAX_FLOOR, f64::max);
    Ok(ensemble)
}

impl Ensemble {
    /// Per-input member-probability variance:
    /// sigma^2(x) = mean_m || p_m(x) - mean_m p_m(x) ||^2.
    pub fn member_variances(&self, features: &Tensor) -> Vec<f64> {
        let outputs: Vec<Tensor> = self
            .members
            .iter()
            .map(|m| forward_eval(&m.params, features).class_probs)
            .collect();
        let n = features.rows();
        let k = outputs[0].cols();
        let m = self.members.len() as f64;
        let mut variances = Vec::with_capacity(n);
        for i in 0..n {
            let mut mean = vec![0.0; k];
            for out in &outputs {
                for (mu, &p) in mean.iter_mut().zip(out.row(i)) {
                    *mu += p;
                }
            }
            for mu in mean.iter_mut() {
                *mu /= m;
            }
            let mut var = 0.0;
            for out in &outputs {
                let mut sq = 0.0;
                for (mu, &p) in mean.iter().zip(out.row(i)) {
                    let d = p - mu;
                    sq += d * d;
                }
                var += sq;
            }
            variances.push(var / m);
        }
        variances
    }

    /// Continuous confidence targets: c(x) = 1 - sigma^2(x) / sigma^2_max,
    /// clamped to [0, 1]. All-members-agree inputs map to exactly 1.
    pub fn disagreement_target(&self, features: &Tensor) -> Vec<f64> {
        self.member_variances(features)
            .into_iter()
            .map(|v| (1.0 - v / self.sigma_max).clamp(0.0, 1.0))
            .collect()
    }
}

/// Distill a fresh student against the ensemble's disagreement targets:
/// cross-entropy plus `lambda * (c - c_target)^2`. With lambda = 0 this is
/// exactly baseline training under the same seed.
pub fn distill_student(
    ensemble: &Ensemble,
    data: &Dataset,
    lambda: f64,
    config: &TrainConfig,
) -> Result<(TrainedModel, TrainingTrace)> {
    let targets = ensemble.disagreement_target(&data.features);
    let mut student_config = config.clone();
    student_config.method = Method::Baseline;
    student_config.lambda = lambda;
    train_with_conf_targets(&student_config, data, &targets)
}

/// A pool of agents with per-domain held-out accuracy rankings and each
/// agent's domain of strength.
pub struct AgentPool {
    pub agents: Vec<TrainedModel>,
    /// Domain where each agent currently ranks best.
    pub assignments: Vec<usize>,
    /// Held-out partition per domain used for rankings.
    pub domains: Vec<Dataset>,
    /// `rankings[domain][agent]` = held-out accuracy.
    pub rankings: Vec<Vec<f64>>,
}

/// Train a pool of agents with diverse seeds on the shared training data
/// and rank everyone on every domain's held-out part.
pub fn build_agent_pool(
    n_agents: usize,
    train_data: &Dataset,
    heldout_domains: &[Dataset],
    config: &TrainConfig,
) -> Result<AgentPool> {
    assert!(n_agents >= 2, "agent pool: needs >= 2 agents");
    assert!(!heldout_domains.is_empty(), "agent pool: needs >= 1 domain");
    let mut agents = Vec::with_capacity(n_agents);
    for a in 0..n_agents {
        let mut agent_config = config.clone();
        agent_config.seed = config.seed + a as u64;
        let (model, _) = train(&agent_config, train_data, train_data)?;
        agents.push(model);
    }
    let mut pool = AgentPool {
        agents,
        assignments: Vec::new(),
        domains: heldout_domains.to_vec(),
        rankings: Vec::new(),
    };
    pool.refresh_rankings();
    Ok(pool)
}

impl AgentPool {
    pub fn refresh_rankings(&mut self) {
        self.rankings = self
            .domains
            .iter()
            .map(|domain| {
                self.agents
                    .iter()
                    .map(|agent| {
                        let out = forward_eval(&agent.params, &domain.features);
                        let preds = out.predictions();
                        preds
                            .iter()
                            .zip(&domain.labels)
                            .filter(|(p, y)| p == y)
                            .count() as f64
                            / domain.len() as f64
                    })
                    .collect()
            })
            .collect();
        self.assignments = (0..self.agents.len())
            .map(|a| {
                let mut best = 0;
                for d in 1..self.domains.len() {
                    if self.rankings[d][a] > self.rankings[best][a] {
                        best = d;
                    }
                }
                best
            })
            .collect();
    }

    /// Experts for a source domain: the top half of agents by held-out
    /// accuracy there (at least one).
    pub fn experts(&self, source: usize) -> Vec<usize> {
        let scores = &self.rankings[source];
        let mut order: Vec<usize> = (0..self.agents.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        order.truncate((self.agents.len() / 2).max(1));
        order
    }

    /// Accuracy-weighted consensus confidence of the experts on a feature
    /// matrix. Weights are a unit-scale softmax of the experts' source
    /// accuracies and sum to one.
    pub fn consensus_confidence(
        &self,
        experts: &[usize],
        source: usize,
        features: &Tensor,
    ) -> Vec<f64> {
        assert!(!experts.is_empty(), "consensus: empty expert set");
        let raw: Vec<f64> = experts.iter().map(|&e| self.rankings[source][e]).collect();
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = raw.iter().map(|&s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }

        let mut consensus = vec![0.0; features.rows()];
        for (&e, &w) in experts.iter().zip(&weights) {
            let conf = forward_eval(&self.agents[e].params, features).confidences();
            for (c, &ci) in consensus.iter_mut().zip(&conf) {
                *c += w * ci;
            }
        }
        consensus
    }
}

/// One adaptive round: experts on the source domain produce consensus
/// confidences on the target domain's examples, and every novice fine-tunes
/// there against the augmented supervision (labels plus consensus targets).
/// Rankings are refreshed afterwards.
pub fn multi_agent_round(
    mut pool: AgentPool,
    source: usize,
    target: usize,
    target_train: &Dataset,
    config: &TrainConfig,
) -> Result<AgentPool> {
    assert!(
        pool.agents.len() >= 2,
        "multi-agent round: needs >= 2 agents"
    );
    assert!(source < pool.domains.len() && target < pool.domains.len());
    assert!(
        !target_train.is_empty(),
        "multi-agent round: empty target domain"
    );
    let experts = pool.experts(source);
    if experts.is_empty() {
        return Err(Error::Config("empty expert set".into()));
    }
    let consensus = pool.consensus_confidence(&experts, source, &target_train.features);

    let novices: Vec<usize> = (0..pool.agents.len())
        .filter(|a| !experts.contains(a))
        .collect();
    for &n in &novices {
        let mut finetune = config.clone();
        finetune.seed = config.seed ^ (0xF1E7 + n as u64);
        finetune.method = Method::Baseline;
        if finetune.lambda == 0.0 {
            // The augmented supervision must actually reach the confidence
            // head.
            finetune.lambda = 1.0;
        }
        let (updated, _) =
            finetune_with_targets(&pool.agents[n], &finetune, target_train, &consensus)?;
        pool.agents[n] = updated;
    }
    pool.refresh_rankings();
    Ok(pool)
}

/// Continue training an existing agent on new data with continuous
/// confidence targets (the distillation loss).
fn finetune_with_targets(
    agent: &TrainedModel,
    config: &TrainConfig,
    data: &Dataset,
    targets: &[f64],
) -> Result<(TrainedModel, TrainingTrace)> {
    // Fine-tuning reuses the training loop but starts from the agent's
    // parameters rather than a fresh initialization.
    crate::train::resume_with_conf_targets(agent.params.clone(), config, data, targets)
}

/// Rank-based (Spearman) correlation with average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 2, "spearman: needs n >= 2");
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// For each ensemble size, the Spearman correlation across regions between
/// the mean disagreement-derived confidence and (1 - injected label
/// variance). The injected variance of a region with keep probability q is
/// q(1 - q).
pub fn aleatoric_convergence_check(
    data: &Dataset,
    region_of: &[usize],
    region_keep_prob: &[f64],
    ms: &[usize],
    config: &TrainConfig,
) -> Result<Vec<(usize, f64)>> {
    assert_eq!(data.len(), region_of.len());
    let n_regions = region_keep_prob.len();
    let inverse_noise: Vec<f64> = region_keep_prob
        .iter()
        .map(|&q| 1.0 - q * (1.0 - q))
        .collect();
    let mut results = Vec::with_capacity(ms.len());
    for &m in ms {
        let ensemble = train_ensemble(m, config, data)?;
        let targets = ensemble.disagreement_target(&data.features);
        let mut sums = vec![0.0; n_regions];
        let mut counts = vec![0usize; n_regions];
        for (&r, &c) in region_of.iter().zip(&targets) {
            sums[r] += c;
            counts[r] += 1;
        }
        let region_means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| s / c.max(1) as f64)
            .collect();
        results.push((m, spearman(&region_means, &inverse_noise)));
    }
    Ok(results)
}

/// Mean disagreement-derived confidence per region.
pub fn region_mean_targets(
    ensemble: &Ensemble,
    data: &Dataset,
    region_of: &[usize],
    n_regions: usize,
) -> Vec<f64> {
    let targets = ensemble.disagreement_target(&data.features);
    let mut sums = vec![0.0; n_regions];
    let mut counts = vec![0usize; n_regions];
    for (&r, &c) in region_of.iter().zip(&targets) {
        sums[r] += c;
        counts[r] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| s / c.max(1) as f64)
        .collect()
}

/// Confidence spread of a trained model on a dataset.
pub fn confidence_std(model: &TrainedModel, data: &Dataset) -> f64 {
    let conf = forward_eval(&model.params, &data.features).confidences();
    population_std(&conf)
}
