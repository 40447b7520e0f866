//! Exact discrete information quantities over the binary-supervision
//! channel: entropies, mutual information, the information gap, and the
//! calibration-error lower bound.
//!
//! All quantities are in bits (log base 2), matching the numeric claims
//! ("1 bit", "log k") these computations check.

/// Discrete joint of a confidence source C* (k levels with weights) and a
/// binary outcome S with `P(S = 1 | C* = level_i) = conditional[i]`.
#[derive(Clone, Debug)]
pub struct JointDistribution {
    pub levels: Vec<f64>,
    pub weights: Vec<f64>,
    pub conditional: Vec<f64>,
}

impl JointDistribution {
    pub fn new(levels: Vec<f64>, weights: Vec<f64>, conditional: Vec<f64>) -> Self {
        let k = levels.len();
        assert!(k >= 1, "joint: no levels");
        assert_eq!(
            weights.len(),
            k,
            "joint: {} weights for {k} levels",
            weights.len()
        );
        assert_eq!(
            conditional.len(),
            k,
            "joint: {} conditionals for {k} levels",
            conditional.len()
        );
        let total: f64 = weights.iter().sum();
        assert!(
            (total - 1.0).abs() <= 1e-12,
            "joint: weights sum to {total}, expected 1"
        );
        assert!(weights.iter().all(|&w| w >= 0.0), "joint: negative weight");
        assert!(
            conditional.iter().all(|&q| (0.0..=1.0).contains(&q)),
            "joint: conditional outside [0, 1]"
        );
        JointDistribution {
            levels,
            weights,
            conditional,
        }
    }

    /// Uniform channel with levels (i + 0.5) / k and the natural
    /// conditionals P(S=1 | C* = c) = c.
    pub fn uniform_channel(k: usize) -> Self {
        assert!(k >= 1);
        let levels: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
        let weights = vec![1.0 / k as f64; k];
        let conditional = levels.clone();
        JointDistribution {
            levels,
            weights,
            conditional,
        }
    }

    pub fn k(&self) -> usize {
        self.levels.len()
    }

    pub fn is_uniform(&self) -> bool {
        let w0 = 1.0 / self.k() as f64;
        self.weights.iter().all(|&w| (w - w0).abs() <= 1e-12)
    }
}

/// Binary entropy in bits, with 0 log 0 = 0. Symmetric about p = 1/2.
pub fn binary_entropy(p: f64) -> f64 {
    assert!(
        (0.0..=1.0).contains(&p),
        "binary_entropy: p {p} outside [0, 1]"
    );
    let term = |x: f64| if x == 0.0 { 0.0 } else { -x * x.log2() };
    (term(p) + term(1.0 - p)).max(0.0)
}

/// Entropy of the confidence source H(C*) in bits.
pub fn source_entropy(j: &JointDistribution) -> f64 {
    j.weights
        .iter()
        .map(|&w| if w == 0.0 { 0.0 } else { -w * w.log2() })
        .sum::<f64>()
        .max(0.0)
}

/// Marginal P(S = 1).
pub fn success_rate(j: &JointDistribution) -> f64 {
    j.weights
        .iter()
        .zip(&j.conditional)
        .map(|(&w, &q)| w * q)
        .sum()
}

/// Exact I(S; C*) = H(S) - H(S | C*) in bits. Bounded by
/// min(H(S), H(C*)) <= 1 bit, which is asserted.
pub fn mutual_information(j: &JointDistribution) -> f64 {
    let h_s = binary_entropy(success_rate(j));
    let h_s_given_c: f64 = j
        .weights
        .iter()
        .zip(&j.conditional)
        .map(|(&w, &q)| w * binary_entropy(q))
        .sum();
    let mi = (h_s - h_s_given_c).max(0.0);
    let bound = h_s.min(source_entropy(j));
    assert!(
        mi <= bound + 1e-9,
        "mutual information {mi} above bound {bound}"
    );
    assert!(mi <= 1.0 + 1e-9, "mutual information {mi} above one bit");
    mi
}

/// Information gap H(C*) - I(S; C*) in bits. For a uniform source this is
/// at least log2 k - 1, which is asserted.
pub fn information_gap(j: &JointDistribution) -> f64 {
    let gap = source_entropy(j) - mutual_information(j);
    if j.is_uniform() {
        let floor = (j.k() as f64).log2() - 1.0;
        assert!(gap >= floor - 1e-9, "uniform gap {gap} below {floor}");
    }
    gap
}

/// Leading term of the calibration-error lower bound:
/// max(0, (1 / 2k) * (1 - n / 2^entropy_bits)). The vanishing finite-sample
/// correction is dropped; exp(H) is read in base 2 for consistency with the
/// entropies above.
pub fn ece_lower_bound(k: usize, n: usize, entropy_bits: f64) -> f64 {
    assert!(k >= 1, "ece_lower_bound: k {k} < 1");
    assert!(n >= 1, "ece_lower_bound: n {n} < 1");
    let bound = 1.0 / (2.0 * k as f64) * (1.0 - n as f64 / entropy_bits.exp2());
    bound.max(0.0)
}

/// Plug-in mutual information between quantized confidence and correctness:
/// confidences fall into `k_bins` equal-width levels and S is the
/// correctness flag.
pub fn empirical_mi_from_run(conf: &[f64], correct: &[bool], k_bins: usize) -> f64 {
    assert!(k_bins >= 1);
    assert_eq!(conf.len(), correct.len());
    assert!(conf.len() >= k_bins, "empirical_mi: need n >= k_bins");
    let n = conf.len() as f64;
    let mut count = vec![0usize; k_bins];
    let mut hits = vec![0usize; k_bins];
    for (&c, &s) in conf.iter().zip(correct) {
        let bin = ((c.clamp(0.0, 1.0) * k_bins as f64) as usize).min(k_bins - 1);
        count[bin] += 1;
        if s {
            hits[bin] += 1;
        }
    }
    let mut weights = Vec::new();
    let mut conditional = Vec::new();
    let mut levels = Vec::new();
    for b in 0..k_bins {
        if count[b] == 0 {
            continue;
        }
        weights.push(count[b] as f64 / n);
        conditional.push(hits[b] as f64 / count[b] as f64);
        levels.push((b as f64 + 0.5) / k_bins as f64);
    }
    // Plug-in weights can be off 1 by float dust; renormalize exactly.
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    mutual_information(&JointDistribution::new(levels, weights, conditional))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn binary_entropy_landmarks() {
        assert_eq!(binary_entropy(0.5), 1.0);
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(1.0), 0.0);
        assert!((binary_entropy(0.25) - 0.8112781244591328).abs() < 1e-12);
        // Symmetry.
        for p in [0.1, 0.3, 0.42] {
            assert!((binary_entropy(p) - binary_entropy(1.0 - p)).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "outside [0, 1]")]
    fn binary_entropy_domain() {
        let _ = binary_entropy(1.5);
    }

    #[test]
    fn independence_gives_zero_information() {
        let j = JointDistribution::new(
            vec![0.25, 0.5, 0.75],
            vec![0.2, 0.3, 0.5],
            vec![0.6, 0.6, 0.6],
        );
        assert!(mutual_information(&j).abs() < 1e-12);
    }

    #[test]
    fn deterministic_binary_source_gives_one_bit() {
        let j = JointDistribution::new(vec![0.3, 0.7], vec![0.5, 0.5], vec![0.0, 1.0]);
        assert!((mutual_information(&j) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn natural_uniform_channel_under_one_bit() {
        let j = JointDistribution::uniform_channel(4);
        assert_eq!(j.levels, vec![0.125, 0.375, 0.625, 0.875]);
        let mi = mutual_information(&j);
        // Exact enumeration: H(S) - mean h(c_i) with P(S=1) = 0.5.
        let expected = 1.0 - j.levels.iter().map(|&c| binary_entropy(c)).sum::<f64>() / 4.0;
        assert!((mi - expected).abs() < 1e-12);
        assert!(mi < 1.0);
    }

    #[test]
    fn gap_for_deterministic_threshold_supervision() {
        // k = 4 uniform, S = [c >= 0.5]: H(C*) = 2 bits, I = 1 bit, gap 1.
        let j = JointDistribution::new(
            vec![0.125, 0.375, 0.625, 0.875],
            vec![0.25; 4],
            vec![0.0, 0.0, 1.0, 1.0],
        );
        assert!((source_entropy(&j) - 2.0).abs() < 1e-12);
        assert!((mutual_information(&j) - 1.0).abs() < 1e-12);
        assert!((information_gap(&j) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_level_source_has_zero_gap() {
        let j = JointDistribution::uniform_channel(1);
        assert_eq!(source_entropy(&j), 0.0);
        assert_eq!(information_gap(&j), 0.0);
    }

    #[test]
    fn uniform_gap_bound_over_random_conditionals() {
        let mut rng = Rng::new(314);
        for k in [8usize, 5, 12] {
            for _ in 0..100 {
                let conditional: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
                let j = JointDistribution::new(
                    (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect(),
                    vec![1.0 / k as f64; k],
                    conditional,
                );
                let gap = information_gap(&j);
                assert!(gap >= (k as f64).log2() - 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn information_bounds_hold_for_random_joints() {
        let mut rng = Rng::new(2718);
        for _ in 0..10_000 {
            let k = 1 + rng.below(6);
            let mut weights: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
            let total: f64 = weights.iter().sum();
            for w in weights.iter_mut() {
                *w /= total;
            }
            let conditional: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let levels: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
            let j = JointDistribution::new(levels, weights, conditional);
            let mi = mutual_information(&j); // asserts bounds internally
            assert!(mi >= 0.0);
        }
    }

    #[test]
    fn coarsening_never_increases_information() {
        // Merging two adjacent levels is a function of C*, so information
        // about S cannot grow.
        let mut rng = Rng::new(99);
        for _ in 0..200 {
            let k = 3 + rng.below(5);
            let mut weights: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
            let total: f64 = weights.iter().sum();
            for w in weights.iter_mut() {
                *w /= total;
            }
            let conditional: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let levels: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
            let j = JointDistribution::new(levels.clone(), weights.clone(), conditional.clone());
            let mi = mutual_information(&j);

            let merge = rng.below(k - 1);
            let mut w2 = Vec::new();
            let mut q2 = Vec::new();
            let mut l2 = Vec::new();
            for i in 0..k {
                if i == merge {
                    let w = weights[i] + weights[i + 1];
                    let q = (weights[i] * conditional[i] + weights[i + 1] * conditional[i + 1]) / w;
                    w2.push(w);
                    q2.push(q);
                    l2.push(0.5 * (levels[i] + levels[i + 1]));
                } else if i != merge + 1 {
                    w2.push(weights[i]);
                    q2.push(conditional[i]);
                    l2.push(levels[i]);
                }
            }
            let total: f64 = w2.iter().sum();
            for w in w2.iter_mut() {
                *w /= total;
            }
            let coarse = JointDistribution::new(l2, w2, q2);
            assert!(mutual_information(&coarse) <= mi + 1e-9);
        }
    }

    #[test]
    fn lower_bound_landmarks() {
        // n >= 2^H clamps to zero.
        assert_eq!(ece_lower_bound(4, 4, 2.0), 0.0);
        assert_eq!(ece_lower_bound(4, 100, 2.0), 0.0);
        // k = 4, H = 2 bits, n = 1: (1/8)(1 - 1/4).
        assert!((ece_lower_bound(4, 1, 2.0) - 0.09375).abs() < 1e-15);
        // Direct substitution at k = 10, H = log2 10, n = 2.
        let h = 10.0f64.log2();
        let expected = (1.0 / 20.0) * (1.0 - 2.0 / 10.0);
        assert!((ece_lower_bound(10, 2, h) - expected).abs() < 1e-12);
    }

    #[test]
    fn lower_bound_monotonicities() {
        let h = 3.0;
        let mut prev = f64::INFINITY;
        for n in 1..20 {
            let b = ece_lower_bound(4, n, h);
            assert!(b <= prev + 1e-15, "bound must be nonincreasing in n");
            prev = b;
        }
        let mut prev = -1.0;
        for i in 0..20 {
            let b = ece_lower_bound(4, 6, 0.5 + i as f64 * 0.25);
            assert!(b >= prev - 1e-15, "bound must be nondecreasing in H");
            prev = b;
        }
    }

    #[test]
    fn empirical_mi_independent_near_zero() {
        let mut rng = Rng::new(55);
        let n = 10_000;
        let conf: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let correct: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.7)).collect();
        let mi = empirical_mi_from_run(&conf, &correct, 8);
        assert!(mi < 0.05, "independent mi {mi}");
    }

    #[test]
    fn empirical_mi_determined_case_is_one_bit() {
        let n = 2000;
        let correct: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let conf: Vec<f64> = correct.iter().map(|&c| if c { 0.9 } else { 0.1 }).collect();
        let mi = empirical_mi_from_run(&conf, &correct, 10);
        assert!((mi - 1.0).abs() < 1e-9, "determined mi {mi}");
    }

    #[test]
    fn empirical_mi_bounded_by_one_bit() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let n = 500;
            let conf: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let correct: Vec<bool> = conf.iter().map(|&c| rng.bernoulli(c)).collect();
            let mi = empirical_mi_from_run(&conf, &correct, 6);
            assert!(mi <= 1.0 + 1e-9);
        }
    }
}
