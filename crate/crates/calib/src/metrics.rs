//! Calibration and diversity metrics: ECE/MCE with reliability bins, the
//! calibration-and-diversity pass gate, and the combined score.

use serde::{Deserialize, Serialize};

/// ECE threshold of the pass gate.
pub const ECE_PASS_THRESHOLD: f64 = 0.10;
/// Confidence standard deviation threshold of the pass gate.
pub const STD_PASS_THRESHOLD: f64 = 0.15;
/// Default bin count for reliability binning.
pub const DEFAULT_N_BINS: usize = 15;

/// One reliability bin over [lo, hi).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub avg_conf: f64,
    pub avg_acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub mean_conf: f64,
    pub std_conf: f64,
    pub n_bins: usize,
    /// Nonempty bins only; ECE and MCE are recomputable from these rows.
    pub bins: Vec<BinRow>,
    /// ece < 0.10 and std_conf > 0.15 simultaneously.
    pub passes_both: bool,
}

impl EvalReport {
    /// Recompute ECE from the stored bin rows (should match `self.ece` to
    /// rounding).
    pub fn ece_from_bins(&self) -> f64 {
        let n: usize = self.bins.iter().map(|b| b.count).sum();
        self.bins
            .iter()
            .map(|b| b.count as f64 / n as f64 * (b.avg_conf - b.avg_acc).abs())
            .sum()
    }

    pub fn mce_from_bins(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| (b.avg_conf - b.avg_acc).abs())
            .fold(0.0, f64::max)
    }
}

/// Bin confidences into `n_bins` equal-width bins on [0, 1] (the last bin is
/// right-inclusive), then report accuracy, ECE, MCE, confidence moments, and
/// per-bin reliability rows. Empty bins are excluded.
pub fn evaluate(conf: &[f64], correct: &[bool], n_bins: usize) -> EvalReport {
    assert!(!conf.is_empty(), "evaluate: empty input");
    assert_eq!(
        conf.len(),
        correct.len(),
        "evaluate: {} confs vs {} flags",
        conf.len(),
        correct.len()
    );
    assert!(n_bins >= 1, "evaluate: n_bins {n_bins} < 1");
    assert!(
        conf.iter().all(|&c| (0.0..=1.0).contains(&c)),
        "evaluate: confidence outside [0, 1]"
    );

    let n = conf.len();
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut acc_sum = vec![0.0; n_bins];
    for (&c, &k) in conf.iter().zip(correct) {
        let bin = ((c * n_bins as f64) as usize).min(n_bins - 1);
        count[bin] += 1;
        conf_sum[bin] += c;
        if k {
            acc_sum[bin] += 1.0;
        }
    }

    let mut bins = Vec::new();
    let mut ece = 0.0;
    let mut mce = 0.0f64;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let avg_conf = conf_sum[b] / count[b] as f64;
        let avg_acc = acc_sum[b] / count[b] as f64;
        let gap = (avg_conf - avg_acc).abs();
        ece += count[b] as f64 / n as f64 * gap;
        mce = mce.max(gap);
        bins.push(BinRow {
            lo: b as f64 / n_bins as f64,
            hi: (b + 1) as f64 / n_bins as f64,
            count: count[b],
            avg_conf,
            avg_acc,
        });
    }

    let accuracy = correct.iter().filter(|&&k| k).count() as f64 / n as f64;
    let mean_conf = conf.iter().sum::<f64>() / n as f64;
    let std_conf = population_std(conf);
    EvalReport {
        accuracy,
        ece,
        mce,
        mean_conf,
        std_conf,
        n_bins,
        bins,
        passes_both: ece < ECE_PASS_THRESHOLD && std_conf > STD_PASS_THRESHOLD,
    }
}

pub fn population_std(xs: &[f64]) -> f64 {
    population_var(xs).sqrt()
}

pub fn population_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// (standard deviation, variance normalized by the maximum variance 0.25 of
/// a [0, 1] variable).
pub fn diversity(conf: &[f64]) -> (f64, f64) {
    assert!(
        conf.len() >= 2,
        "diversity: needs n >= 2, got {}",
        conf.len()
    );
    let var = population_var(conf);
    (var.sqrt(), var / 0.25)
}

/// accuracy * exp(-beta * ece) * (1 + gamma * diversity_norm).
pub fn score_cal(accuracy: f64, ece: f64, diversity_norm: f64, beta: f64, gamma: f64) -> f64 {
    assert!(beta >= 0.0 && gamma >= 0.0, "score_cal: negative weights");
    accuracy * (-beta * ece).exp() * (1.0 + gamma * diversity_norm)
}

/// Expected accuracy-style score of always answering versus abstaining on
/// the uncertain fraction. Guessing can only help: the pair satisfies
/// guess >= abstain, with equality exactly when `p_correct_on_uncertain` or
/// `frac_uncertain` is zero.
pub fn guess_vs_abstain(p_correct_on_uncertain: f64, frac_uncertain: f64) -> (f64, f64) {
    assert!((0.0..=1.0).contains(&p_correct_on_uncertain));
    assert!((0.0..=1.0).contains(&frac_uncertain));
    let score_abstain = 1.0 - frac_uncertain;
    let score_guess = score_abstain + frac_uncertain * p_correct_on_uncertain;
    assert!(score_guess >= score_abstain);
    (score_guess, score_abstain)
}
