//! Training objectives: cross-entropy, negative-reward penalties, Brier
//! score with diversity regularization, and the composite weighting.
//!
//! Every loss is assembled on a [`Tape`] so gradients flow to the confidence
//! head and encoder. Correct/incorrect and certain/uncertain case selection
//! uses constant masks computed from forward values; the branch indicator
//! itself is not differentiated, matching how the reference penalties are
//! defined.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Clamp floor applied to probabilities before `log`, keeping cross-entropy
/// finite when softmax underflows.
pub const LOG_CLAMP: f64 = 1e-12;

/// Epsilon inside the diversity term `log(std + eps)`.
pub const DIVERSITY_EPS: f64 = 1e-6;

/// Penalty weights for the negative-reward objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NegativeRewardParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub mu1: f64,
    pub mu2: f64,
    /// Overall penalty strength: the loss adds `-alpha * mean(reward)`.
    pub alpha: f64,
    /// A sample is "certain" when its uncertainty (1 - confidence) falls
    /// below this threshold.
    pub certain_threshold: f64,
}

impl Default for NegativeRewardParams {
    fn default() -> Self {
        NegativeRewardParams {
            lambda1: 0.5,
            lambda2: 2.0,
            kappa1: 0.2,
            kappa2: 0.1,
            mu1: 0.3,
            mu2: 1.0,
            alpha: 1.0,
            certain_threshold: 0.5,
        }
    }
}

impl NegativeRewardParams {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("alpha", self.alpha),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!(
                    "negative reward parameter {name} = {v} must be >= 0"
                ));
            }
        }
        if !(self.certain_threshold > 0.0 && self.certain_threshold < 1.0) {
            return Err(format!(
                "certain_threshold {} must lie in (0, 1)",
                self.certain_threshold
            ));
        }
        Ok(())
    }
}

/// `-mean_i log p_i[y_i]`, probabilities clamped at `LOG_CLAMP`.
pub fn cross_entropy(tape: &mut Tape, class_probs: Var, labels: &[usize]) -> Var {
    let picked = tape.pick_per_row(class_probs, labels);
    let clamped = tape.clamp_min(picked, LOG_CLAMP);
    let logp = tape.log(clamped);
    let mean = tape.mean(logp);
    tape.mul_scalar(mean, -1.0)
}

fn mask_column(tape: &mut Tape, bits: impl Iterator<Item = bool>, n: usize) -> Var {
    let data: Vec<f64> = bits.map(|b| if b { 1.0 } else { 0.0 }).collect();
    assert_eq!(data.len(), n);
    tape.constant(Tensor::column(data))
}

/// Two-case rewards: r = -lambda1 (1 - c)^2 when correct (low confidence is
/// penalized), r = -lambda2 c^2 when wrong (high confidence is penalized).
/// Returns the per-sample rewards `[n, 1]` and the scalar loss term
/// `-alpha * mean(r)` to add to the classification loss.
pub fn negative_reward_simple(
    tape: &mut Tape,
    conf: Var,
    correct: &[bool],
    p: &NegativeRewardParams,
) -> (Var, Var) {
    let n = tape.value(conf).rows();
    assert_eq!(
        n,
        correct.len(),
        "negative_reward: {n} confidences vs {} flags",
        correct.len()
    );
    let ones = tape.constant(Tensor::column(vec![1.0; n]));
    let mask_correct = mask_column(tape, correct.iter().copied(), n);
    let mask_wrong = mask_column(tape, correct.iter().map(|c| !c), n);

    let gap = tape.sub(ones, conf);
    let gap_sq = tape.square(gap);
    let correct_pen = tape.mul_scalar(gap_sq, -p.lambda1);
    let correct_term = tape.mul(mask_correct, correct_pen);

    let conf_sq = tape.square(conf);
    let wrong_pen = tape.mul_scalar(conf_sq, -p.lambda2);
    let wrong_term = tape.mul(mask_wrong, wrong_pen);

    let rewards = tape.add(correct_term, wrong_term);
    let mean_r = tape.mean(rewards);
    let loss_term = tape.mul_scalar(mean_r, -p.alpha);
    (rewards, loss_term)
}

/// Three-case rewards from the full penalty scheme. Certainty is decided by
/// `uncert < certain_threshold` on forward values:
/// certain & correct:  -lambda1 (1 - c)^2 + mu1
/// certain & wrong:    -lambda2 c^2 - mu2
/// uncertain:           `kappa1 * [correct] - kappa2`  (constant in c)
/// Returns the mean reward over the batch, differentiable in the
/// confidence.
pub fn negative_reward_full(
    tape: &mut Tape,
    labels: &[usize],
    class_probs: Var,
    conf: Var,
    uncert: Var,
    p: &NegativeRewardParams,
) -> Var {
    let n = tape.value(conf).rows();
    assert_eq!(
        n,
        labels.len(),
        "negative_reward: {n} confidences vs {} labels",
        labels.len()
    );
    let correct: Vec<bool> = {
        let probs = tape.value(class_probs);
        (0..n)
            .map(|i| crate::model::argmax(probs.row(i)) == labels[i])
            .collect()
    };
    let certain: Vec<bool> = tape
        .value(uncert)
        .data()
        .iter()
        .map(|&u| u < p.certain_threshold)
        .collect();

    let ones = tape.constant(Tensor::column(vec![1.0; n]));
    let mask_cc = mask_column(tape, correct.iter().zip(&certain).map(|(&c, &z)| c && z), n);
    let mask_cw = mask_column(
        tape,
        correct.iter().zip(&certain).map(|(&c, &z)| !c && z),
        n,
    );

    let gap = tape.sub(ones, conf);
    let gap_sq = tape.square(gap);
    let scaled = tape.mul_scalar(gap_sq, -p.lambda1);
    let cc_reward = tape.add_scalar(scaled, p.mu1);
    let cc_term = tape.mul(mask_cc, cc_reward);

    let conf_sq = tape.square(conf);
    let scaled_wrong = tape.mul_scalar(conf_sq, -p.lambda2);
    let cw_reward = tape.add_scalar(scaled_wrong, -p.mu2);
    let cw_term = tape.mul(mask_cw, cw_reward);

    // Uncertain rewards carry no confidence gradient; bake them into a
    // constant.
    let uncertain_rewards: Vec<f64> = correct
        .iter()
        .zip(&certain)
        .map(|(&c, &z)| {
            if z {
                0.0
            } else if c {
                p.kappa1 - p.kappa2
            } else {
                -p.kappa2
            }
        })
        .collect();
    let uncertain_term = tape.constant(Tensor::column(uncertain_rewards));

    let partial = tape.add(cc_term, cw_term);
    let rewards = tape.add(partial, uncertain_term);
    tape.mean(rewards)
}

/// `mean[(c_i - [correct_i])^2]`: the confidence Brier score against the
/// binary correctness outcome.
pub fn confidence_brier(tape: &mut Tape, conf: Var, correct: &[bool]) -> Var {
    let n = tape.value(conf).rows();
    assert_eq!(n, correct.len());
    let targets = mask_column(tape, correct.iter().copied(), n);
    let diff = tape.sub(conf, targets);
    let sq = tape.square(diff);
    tape.mean(sq)
}

/// Brier score plus the diversity regularizer `-beta * log(std(c) + eps)`.
/// Needs at least two samples for the standard deviation.
pub fn brier_diversity(tape: &mut Tape, conf: Var, correct: &[bool], beta: f64, eps: f64) -> Var {
    let n = tape.value(conf).rows();
    assert!(n >= 2, "brier_diversity: std needs n >= 2, got {n}");
    let brier = confidence_brier(tape, conf, correct);

    // Population variance as E[c^2] - E[c]^2, floored before the square
    // root so a collapsed batch yields a zero gradient instead of an
    // infinite one.
    let sq = tape.square(conf);
    let mean_sq = tape.mean(sq);
    let mean_c = tape.mean(conf);
    let mean_c_sq = tape.square(mean_c);
    let var = tape.sub(mean_sq, mean_c_sq);
    let var_floored = tape.clamp_min(var, 1e-24);
    let std = tape.sqrt(var_floored);
    let shifted = tape.add_scalar(std, eps);
    let log_std = tape.log(shifted);
    let diversity_term = tape.mul_scalar(log_std, -beta);

    tape.add(brier, diversity_term)
}

/// Squared error of the confidence against fixed per-sample targets, the
/// distillation objective for continuous supervision.
pub fn confidence_target_sse(tape: &mut Tape, conf: Var, targets: &[f64]) -> Var {
    let n = tape.value(conf).rows();
    assert_eq!(n, targets.len());
    let t = tape.constant(Tensor::column(targets.to_vec()));
    let diff = tape.sub(conf, t);
    let sq = tape.square(diff);
    tape.mean(sq)
}

/// cls_loss + lambda * conf_loss.
pub fn composite_loss(tape: &mut Tape, cls_loss: Var, conf_loss: Var, lambda: f64) -> Var {
    let weighted = tape.mul_scalar(conf_loss, lambda);
    tape.add(cls_loss, weighted)
}

/// Cosine annealing from `base` (step 0) to `floor` (step = total),
/// monotone nonincreasing in between.
pub fn cosine_anneal(step: usize, total: usize, base: f64, floor: f64) -> f64 {
    assert!(total >= 1, "cosine_anneal: total {total} < 1");
    assert!(step <= total, "cosine_anneal: step {step} > total {total}");
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::grad_check;

    fn conf_var(tape: &mut Tape, values: &[f64]) -> Var {
        tape.param(Tensor::column(values.to_vec()))
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let ce = cross_entropy(&mut tape, probs, &[0, 1]);
        assert!(tape.value(ce).item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_binary_is_ln2() {
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]));
        let ce = cross_entropy(&mut tape, probs, &[0, 1]);
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_hand_sum() {
        let rows: Vec<Vec<f64>> = vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.55, 0.45]];
        let labels = vec![0usize, 1, 1];
        let expected: f64 = -(rows[0][0].ln() + rows[1][1].ln() + rows[2][1].ln()) / 3.0;
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::from_rows(&rows));
        let ce = cross_entropy(&mut tape, probs, &labels);
        assert!((tape.value(ce).item() - expected).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "label")]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]));
        let _ = cross_entropy(&mut tape, probs, &[2]);
    }

    #[test]
    fn simple_rewards_match_formulas() {
        let p = NegativeRewardParams::default();
        let mut tape = Tape::new();
        // correct with c = 1 gives r = 0; wrong with c = 1 gives -lambda2.
        let conf = conf_var(&mut tape, &[1.0, 1.0]);
        let (rewards, _) = negative_reward_simple(&mut tape, conf, &[true, false], &p);
        let r = tape.value(rewards).data().to_vec();
        assert!((r[0] - 0.0).abs() < 1e-15);
        assert!((r[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn simple_rewards_mean_matches_hand_computation() {
        let p = NegativeRewardParams {
            alpha: 0.7,
            ..Default::default()
        };
        let conf = [0.9f64, 0.2, 0.6, 0.35];
        let correct = [true, true, false, false];
        let hand: f64 = [
            -0.5 * (1.0 - 0.9_f64).powi(2),
            -0.5 * (1.0 - 0.2_f64).powi(2),
            -2.0 * 0.6_f64.powi(2),
            -2.0 * 0.35_f64.powi(2),
        ]
        .iter()
        .sum::<f64>()
            / 4.0;
        let mut tape = Tape::new();
        let c = conf_var(&mut tape, &conf);
        let (rewards, loss_term) = negative_reward_simple(&mut tape, c, &correct, &p);
        let mean_r = tape.value(rewards).data().iter().sum::<f64>() / 4.0;
        assert!((mean_r - hand).abs() < 1e-15);
        assert!((tape.value(loss_term).item() - (-0.7 * hand)).abs() < 1e-15);
    }

    #[test]
    fn simple_reward_gradient_signs_push_to_extremes() {
        // Correct predictions are pushed toward c = 1 (negative gradient of
        // the penalty for c < 1); incorrect toward c = 0 (positive gradient
        // for c > 0). The loss term is -alpha * mean(r).
        let p = NegativeRewardParams::default();
        for &(c0, correct) in &[
            (0.1, true),
            (0.5, true),
            (0.9, true),
            (0.1, false),
            (0.5, false),
            (0.9, false),
        ] {
            let mut tape = Tape::new();
            let c = conf_var(&mut tape, &[c0]);
            let (_, loss_term) = negative_reward_simple(&mut tape, c, &[correct], &p);
            let grads = tape.backward(loss_term);
            let g = grads.get(c).data()[0];
            if correct {
                assert!(g < 0.0, "correct at c={c0}: gradient {g} should pull up");
            } else {
                assert!(g > 0.0, "wrong at c={c0}: gradient {g} should push down");
            }
        }
    }

    #[test]
    fn full_rewards_match_case_table() {
        let p = NegativeRewardParams::default();
        // Build probs that make rows 0,1 argmax-correct and rows 2,3 wrong.
        let probs_rows = vec![
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.3, 0.7],
            vec![0.8, 0.2],
        ];
        let labels = vec![0usize, 1, 0, 1];
        // Confidences: certain-correct (c=1), uncertain-correct (c=0.3),
        // certain-wrong (c=1), uncertain-wrong (c=0.2).
        let conf_values = [1.0, 0.3, 1.0, 0.2];
        let expected = [
            -0.5 * 0.0 + 0.3, // certain correct: mu1
            0.2 - 0.1,        // uncertain correct: kappa1 - kappa2
            -2.0 - 1.0,       // certain wrong: -lambda2 - mu2
            -0.1,             // uncertain wrong: -kappa2
        ];
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::from_rows(&probs_rows));
        let conf = conf_var(&mut tape, &conf_values);
        let ones = tape.constant(Tensor::column(vec![1.0; 4]));
        let uncert = tape.sub(ones, conf);
        let mean_r = negative_reward_full(&mut tape, &labels, probs, conf, uncert, &p);
        let expected_mean = expected.iter().sum::<f64>() / 4.0;
        assert!(
            (tape.value(mean_r).item() - expected_mean).abs() < 1e-12,
            "mean {} vs {}",
            tape.value(mean_r).item(),
            expected_mean
        );
    }

    #[test]
    fn brier_zero_when_confidence_matches_outcome() {
        let mut tape = Tape::new();
        let conf = conf_var(&mut tape, &[1.0, 0.0, 1.0]);
        let loss = brier_diversity(&mut tape, conf, &[true, false, true], 0.0, DIVERSITY_EPS);
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn brier_constant_confidence_hits_penalty_floor() {
        let mut tape = Tape::new();
        let conf = conf_var(&mut tape, &[0.6, 0.6, 0.6, 0.6]);
        let beta = 0.25;
        let loss = brier_diversity(
            &mut tape,
            conf,
            &[true, true, false, true],
            beta,
            DIVERSITY_EPS,
        );
        let brier_part = (0.4f64.powi(2) + 0.4f64.powi(2) + 0.6f64.powi(2) + 0.4f64.powi(2)) / 4.0;
        let floor = -beta * DIVERSITY_EPS.ln();
        let got = tape.value(loss).item();
        assert!(
            (got - (brier_part + floor)).abs() < 1e-6,
            "loss {got} vs {}",
            brier_part + floor
        );
    }

    #[test]
    fn brier_diversity_matches_scalar_oracle() {
        let conf = [0.8f64, 0.3, 0.65, 0.45, 0.9];
        let correct = [true, false, true, true, false];
        let beta = 0.1;
        let n = conf.len() as f64;
        let brier: f64 = conf
            .iter()
            .zip(&correct)
            .map(|(&c, &k)| (c - if k { 1.0 } else { 0.0 }).powi(2))
            .sum::<f64>()
            / n;
        let mean = conf.iter().sum::<f64>() / n;
        let var = conf.iter().map(|&c| (c - mean) * (c - mean)).sum::<f64>() / n;
        let expected = brier - beta * (var.sqrt() + DIVERSITY_EPS).ln();
        let mut tape = Tape::new();
        let c = conf_var(&mut tape, &conf);
        let loss = brier_diversity(&mut tape, c, &correct, beta, DIVERSITY_EPS);
        assert!((tape.value(loss).item() - expected).abs() < 1e-10);
    }

    #[test]
    #[should_panic(expected = "n >= 2")]
    fn brier_diversity_needs_two_samples() {
        let mut tape = Tape::new();
        let conf = conf_var(&mut tape, &[0.5]);
        let _ = brier_diversity(&mut tape, conf, &[true], 0.1, DIVERSITY_EPS);
    }

    #[test]
    fn brier_decomposition_identity() {
        // For outcomes ~ Bernoulli(p) and constant confidence c, the
        // expected Brier score is (c - p)^2 + p(1 - p).
        let mut rng = Rng::new(271828);
        let n = 100_000;
        for &(c, p) in &[(0.3, 0.7), (0.8, 0.8), (0.5, 0.25), (0.9, 0.55)] {
            let empirical: f64 = (0..n)
                .map(|_| {
                    let outcome = if rng.bernoulli(p) { 1.0 } else { 0.0 };
                    (c - outcome) * (c - outcome)
                })
                .sum::<f64>()
                / n as f64;
            let expected = (c - p) * (c - p) + p * (1.0 - p);
            assert!(
                (empirical - expected).abs() < 0.01,
                "c={c}, p={p}: empirical {empirical} vs {expected}"
            );
        }
    }

    #[test]
    fn composite_identity_and_sums() {
        let mut tape = Tape::new();
        let cls = tape.constant(Tensor::scalar(0.5));
        let conf = tape.constant(Tensor::scalar(0.5));
        let l0 = composite_loss(&mut tape, cls, conf, 0.0);
        assert_eq!(tape.value(l0).item(), 0.5);
        let l1 = composite_loss(&mut tape, cls, conf, 1.0);
        assert_eq!(tape.value(l1).item(), 1.0);
        let cls2 = tape.constant(Tensor::scalar(0.3));
        let conf2 = tape.constant(Tensor::scalar(0.1));
        let l2 = composite_loss(&mut tape, cls2, conf2, 2.0);
        assert!((tape.value(l2).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cosine_anneal_endpoints_and_midpoint() {
        assert_eq!(cosine_anneal(0, 100, 1.0, 0.1), 1.0);
        assert!((cosine_anneal(100, 100, 1.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((cosine_anneal(50, 100, 1.0, 0.1) - 0.55).abs() < 1e-12);
        // Monotone nonincreasing.
        let mut prev = f64::INFINITY;
        for step in 0..=100 {
            let v = cosine_anneal(step, 100, 2.0, 0.2);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn all_losses_grad_check() {
        let mut rng = Rng::new(13);
        for trial in 0..20 {
            let n = 6;
            let conf: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.05, 0.95)).collect();
            let correct: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.6)).collect();
            let p = NegativeRewardParams::default();

            let c1 = correct.clone();
            let pp = p;
            let err = grad_check(
                move |tape, vars| {
                    let (_, term) = negative_reward_simple(tape, vars[0], &c1, &pp);
                    term
                },
                &[Tensor::column(conf.clone())],
                1e-6,
            );
            assert!(err < 1e-4, "simple reward trial {trial}: {err}");

            let c2 = correct.clone();
            let err = grad_check(
                move |tape, vars| brier_diversity(tape, vars[0], &c2, 0.1, DIVERSITY_EPS),
                &[Tensor::column(conf.clone())],
                1e-6,
            );
            assert!(err < 1e-4, "brier trial {trial}: {err}");

            let targets: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 1.0)).collect();
            let err = grad_check(
                move |tape, vars| confidence_target_sse(tape, vars[0], &targets),
                &[Tensor::column(conf.clone())],
                1e-6,
            );
            assert!(err < 1e-4, "distill trial {trial}: {err}");

            // Full reward: keep confidences away from the certainty
            // threshold so the constant masks do not flip under the
            // finite-difference wiggle.
            let conf_full: Vec<f64> = conf
                .iter()
                .map(|&c| if (c - 0.5).abs() < 0.05 { 0.6 } else { c })
                .collect();
            let labels: Vec<usize> = correct.iter().map(|&c| if c { 0 } else { 1 }).collect();
            let probs = Tensor::from_rows(&(0..n).map(|_| vec![0.8, 0.2]).collect::<Vec<_>>());
            let pp2 = p;
            let err = grad_check(
                move |tape, vars| {
                    let probs = tape.constant(probs.clone());
                    let ones = tape.constant(Tensor::column(vec![1.0; n]));
                    let uncert = tape.sub(ones, vars[0]);
                    let mean_r = negative_reward_full(tape, &labels, probs, vars[0], uncert, &pp2);
                    tape.mul_scalar(mean_r, -1.0)
                },
                &[Tensor::column(conf_full)],
                1e-6,
            );
            assert!(err < 1e-4, "full reward trial {trial}: {err}");
        }
    }
}
