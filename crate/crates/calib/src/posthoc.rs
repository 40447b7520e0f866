//! Post-hoc calibrators: temperature scaling on logits, Platt scaling and
//! isotonic regression on scalar confidence scores.
//!
//! Every fitted map is monotone nondecreasing, so calibrated confidences
//! preserve the ordering of the raw ones and downstream argmax decisions
//! are unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::population_var;
use crate::tape::{sigmoid, softmax_into};
use crate::tensor::Tensor;

pub const TEMP_CLAMP: (f64, f64) = (0.05, 20.0);
pub const DEFAULT_FIT_ITERS: usize = 1000;
pub const DEFAULT_TEMP_LR: f64 = 0.05;
pub const DEFAULT_PLATT_LR: f64 = 0.1;

/// A fitted monotone transform of confidence scores (or, for temperature,
/// of logits).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationMap {
    Identity,
    Temperature {
        t: f64,
    },
    /// p(s) = sigmoid(-(a * logit(s) + b)) with a <= 0.
    Platt {
        a: f64,
        b: f64,
    },
    /// Right-continuous step function with clamping outside the breakpoint
    /// range; `values` is nondecreasing.
    Isotonic {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
}

impl CalibrationMap {
    pub fn kind_name(&self) -> &'static str {
        match self {
            CalibrationMap::Identity => "identity",
            CalibrationMap::Temperature { .. } => "temperature",
            CalibrationMap::Platt { .. } => "platt",
            CalibrationMap::Isotonic { .. } => "isotonic",
        }
    }

    /// Apply to scalar confidence scores. Temperature maps operate on
    /// logits, not scores; asking for scores there is a contract mismatch.
    pub fn apply_scores(&self, scores: &[f64]) -> Result<Vec<f64>> {
        match self {
            CalibrationMap::Identity => Ok(scores.to_vec()),
            CalibrationMap::Temperature { .. } => Err(Error::Fit(
                "temperature map applies to logits, not scalar scores".into(),
            )),
            CalibrationMap::Platt { a, b } => Ok(scores
                .iter()
                .map(|&s| sigmoid(-(a * score_logit(s) + b)))
                .collect()),
            CalibrationMap::Isotonic {
                breakpoints,
                values,
            } => Ok(scores
                .iter()
                .map(|&s| step_eval(breakpoints, values, s))
                .collect()),
        }
    }

    /// Apply to logits `[n, K]`, producing calibrated probabilities
    /// `[n, K]`. Only identity and temperature maps accept logits.
    pub fn apply_logits(&self, logits: &Tensor) -> Result<Tensor> {
        let t = match self {
            CalibrationMap::Identity => 1.0,
            CalibrationMap::Temperature { t } => *t,
            other => {
                return Err(Error::Fit(format!(
                    "{} map applies to scalar scores, not logits",
                    other.kind_name()
                )))
            }
        };
        let (n, k) = (logits.rows(), logits.cols());
        let mut out = vec![0.0; n * k];
        let mut scaled = vec![0.0; k];
        for i in 0..n {
            for (j, s) in scaled.iter_mut().enumerate() {
                *s = logits.at(i, j) / t;
            }
            softmax_into(&scaled, &mut out[i * k..(i + 1) * k]);
        }
        Ok(Tensor::new(vec![n, k], out))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("calibration map serializes")
    }

    pub fn from_json(text: &str) -> Result<CalibrationMap> {
        let map: CalibrationMap = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CalibrationMap::Identity => Ok(()),
            CalibrationMap::Temperature { t } => {
                if !(t.is_finite() && *t > 0.0) {
                    return Err(Error::Fit(format!("temperature {t} must be positive")));
                }
                Ok(())
            }
            CalibrationMap::Platt { a, b } => {
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::Fit("platt parameters must be finite".into()));
                }
                if *a > 0.0 {
                    return Err(Error::Fit(format!("platt slope {a} must be <= 0")));
                }
                Ok(())
            }
            CalibrationMap::Isotonic {
                breakpoints,
                values,
            } => {
                if breakpoints.len() != values.len() || breakpoints.is_empty() {
                    return Err(Error::Fit(
                        "isotonic map needs matched nonempty arrays".into(),
                    ));
                }
                if !breakpoints.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::Fit(
                        "isotonic breakpoints must be strictly increasing".into(),
                    ));
                }
                if !values.windows(2).all(|w| w[0] <= w[1]) {
                    return Err(Error::Fit("isotonic values must be nondecreasing".into()));
                }
                if !values.iter().all(|v| (0.0..=1.0).contains(v)) {
                    return Err(Error::Fit("isotonic values must lie in [0, 1]".into()));
                }
                Ok(())
            }
        }
    }
}

fn step_eval(breakpoints: &[f64], values: &[f64], s: f64) -> f64 {
    // Right-continuous: value at breakpoints[j] holds on [bp[j], bp[j+1]).
    let idx = breakpoints.partition_point(|&x| x <= s);
    if idx == 0 {
        values[0]
    } else {
        values[idx - 1]
    }
}

fn score_logit(s: f64) -> f64 {
    let c = s.clamp(1e-7, 1.0 - 1e-7);
    (c / (1.0 - c)).ln()
}

/// Logit rows [logit(c), 0] for a confidence channel, so temperature
/// scaling (and its NLL fit) can run on scalar confidences: the softmax of
/// such a row recovers sigmoid(logit(c) / T) in its first column.
pub fn confidence_logits(conf: &[f64]) -> Tensor {
    let rows: Vec<Vec<f64>> = conf.iter().map(|&c| vec![score_logit(c), 0.0]).collect();
    Tensor::from_rows(&rows)
}

/// Correctness flags as labels for [`confidence_logits`] rows: class 0 is
/// "correct" (first column carries the confidence logit).
pub fn confidence_labels(correct: &[bool]) -> Vec<usize> {
    correct.iter().map(|&c| if c { 0 } else { 1 }).collect()
}

/// Gradient descent on the scaled-softmax negative log-likelihood, starting
/// from T = 1. The fitted temperature is clamped to [0.05, 20].
pub fn fit_temperature(
    logits: &Tensor,
    labels: &[usize],
    iters: usize,
    lr: f64,
) -> Result<CalibrationMap> {
    assert!(logits.rows() >= 1, "fit_temperature: empty logits");
    assert_eq!(
        logits.rows(),
        labels.len(),
        "fit_temperature: rows vs labels"
    );
    let (n, k) = (logits.rows(), logits.cols());
    let mut t: f64 = 1.0;
    let mut probs = vec![0.0; k];
    let mut scaled = vec![0.0; k];
    for _ in 0..iters {
        // dNLL/dT = mean_i (z_{i,y_i} - E_p[z_i]) / T^2.
        let mut grad = 0.0;
        for i in 0..n {
            let row = logits.row(i);
            for (j, s) in scaled.iter_mut().enumerate() {
                *s = row[j] / t;
            }
            softmax_into(&scaled, &mut probs);
            let expected: f64 = probs.iter().zip(row).map(|(&p, &z)| p * z).sum();
            grad += row[labels[i]] - expected;
        }
        grad /= n as f64 * t * t;
        if !grad.is_finite() {
            return Err(Error::Fit(format!(
                "non-finite temperature gradient at T = {t}"
            )));
        }
        t -= (lr * grad).clamp(-0.25, 0.25);
        t = t.clamp(TEMP_CLAMP.0, TEMP_CLAMP.1);
    }
    let map = CalibrationMap::Temperature { t };
    if nll(logits, labels, t).is_finite() {
        Ok(map)
    } else {
        Err(Error::Fit(format!("non-finite NLL at fitted T = {t}")))
    }
}

/// Mean negative log-likelihood of softmax(z / T); the quantity the
/// temperature fit minimizes.
pub fn nll(logits: &Tensor, labels: &[usize], t: f64) -> f64 {
    let (n, k) = (logits.rows(), logits.cols());
    let mut probs = vec![0.0; k];
    let mut scaled = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        for (j, s) in scaled.iter_mut().enumerate() {
            *s = row[j] / t;
        }
        softmax_into(&scaled, &mut probs);
        total -= probs[labels[i]].max(1e-300).ln();
    }
    total / n as f64
}

/// Platt scaling on the logit-transformed score: p = sigmoid(-(a x + b))
/// fit by gradient descent on the log loss. Requires both outcomes present.
/// The slope is projected to a <= 0 after fitting so the map stays
/// nondecreasing in the score.
pub fn fit_platt(
    scores: &[f64],
    correct: &[bool],
    iters: usize,
    lr: f64,
) -> Result<CalibrationMap> {
    assert_eq!(scores.len(), correct.len(), "fit_platt: scores vs flags");
    assert!(scores.iter().all(|s| s.is_finite()), "fit_platt: non-finite score");
    let n = scores.len();
    let positives = correct.iter().filter(|&&c| c).count();
    if positives == 0 || positives == n {
        return Err(Error::Fit("platt fit needs both outcomes present".into()));
    }
    let xs: Vec<f64> = scores.iter().map(|&s| score_logit(s)).collect();
    let ts: Vec<f64> = correct.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let (mut a, mut b) = (-1.0f64, 0.0f64);
    for _ in 0..iters {
        let mut ga = 0.0;
        let mut gb = 0.0;
        for (&x, &t) in xs.iter().zip(&ts) {
            let p = sigmoid(-(a * x + b));
            ga += (t - p) * x;
            gb += t - p;
        }
        ga /= n as f64;
        gb /= n as f64;
        if !(ga.is_finite() && gb.is_finite()) {
            return Err(Error::Fit("non-finite platt gradient".into()));
        }
        a -= (lr * ga).clamp(-1.0, 1.0);
        b -= (lr * gb).clamp(-1.0, 1.0);
    }
    Ok(CalibrationMap::Platt { a: a.min(0.0), b })
}

/// Log loss of a fitted map on held-out scores.
pub fn calibration_log_loss(map: &CalibrationMap, scores: &[f64], correct: &[bool]) -> Result<f64> {
    let p = map.apply_scores(scores)?;
    let n = p.len() as f64;
    Ok(p.iter()
        .zip(correct)
        .map(|(&pi, &c)| {
            let pi = pi.clamp(1e-12, 1.0 - 1e-12);
            if c {
                -pi.ln()
            } else {
                -(1.0 - pi).ln()
            }
        })
        .sum::<f64>()
        / n)
}

/// Pool-adjacent-violators on score-sorted outcomes, ties pooled first.
/// Produces the least-squares monotone nondecreasing fit; evaluation is the
/// right-continuous step function through the pooled points.
pub fn fit_isotonic(scores: &[f64], correct: &[bool]) -> CalibrationMap {
    assert_eq!(scores.len(), correct.len(), "fit_isotonic: scores vs flags");
    assert!(!scores.is_empty(), "fit_isotonic: empty input");
    assert!(scores.iter().all(|s| s.is_finite()), "fit_isotonic: non-finite score");

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap().then(i.cmp(&j)));

    // Pool exact score ties into weighted points.
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for &i in &order {
        let y = if correct[i] { 1.0 } else { 0.0 };
        if let Some(last) = xs.last() {
            if *last == scores[i] {
                let w = ws.last_mut().unwrap();
                let v = ys.last_mut().unwrap();
                *v = (*v * *w + y) / (*w + 1.0);
                *w += 1.0;
                continue;
            }
        }
        xs.push(scores[i]);
        ys.push(y);
        ws.push(1.0);
    }

    // PAV sweep: merge any block that violates monotonicity with its
    // predecessor, then re-check leftward.
    let mut vals: Vec<f64> = Vec::with_capacity(ys.len());
    let mut weights: Vec<f64> = Vec::with_capacity(ys.len());
    let mut counts: Vec<usize> = Vec::with_capacity(ys.len());
    for (y, w) in ys.iter().zip(&ws) {
        vals.push(*y);
        weights.push(*w);
        counts.push(1);
        while vals.len() > 1 && vals[vals.len() - 2] > vals[vals.len() - 1] {
            let (v2, w2, c2) = (
                vals.pop().unwrap(),
                weights.pop().unwrap(),
                counts.pop().unwrap(),
            );
            let last = vals.len() - 1;
            let merged_w = weights[last] + w2;
            vals[last] = (vals[last] * weights[last] + v2 * w2) / merged_w;
            weights[last] = merged_w;
            counts[last] += c2;
        }
    }

    // Expand block values back over their pooled breakpoints.
    let mut values = Vec::with_capacity(xs.len());
    for (v, c) in vals.iter().zip(&counts) {
        for _ in 0..*c {
            values.push(*v);
        }
    }
    CalibrationMap::Isotonic {
        breakpoints: xs,
        values,
    }
}

/// Variance change from calibration plus the floor it is measured against:
/// delta_var = var(before) - var(after) and
/// bound = (mean(before) - accuracy)^2 / 4 - ece(after)^2,
/// where ece(after) is computed against the supplied correctness flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompressionReport {
    pub delta_var: f64,
    pub bound: f64,
    pub holds: bool,
    pub ece_after: f64,
}

pub fn compression_report(
    before: &[f64],
    after: &[f64],
    correct: &[bool],
    accuracy: f64,
    n_bins: usize,
) -> CompressionReport {
    assert_eq!(
        before.len(),
        after.len(),
        "compression_report: length mismatch"
    );
    let delta_var = population_var(before) - population_var(after);
    let ece_after = crate::metrics::evaluate(after, correct, n_bins).ece;
    let mean_before = before.iter().sum::<f64>() / before.len() as f64;
    let bound = (mean_before - accuracy).powi(2) / 4.0 - ece_after * ece_after;
    CompressionReport {
        delta_var,
        bound,
        holds: delta_var >= bound,
        ece_after,
    }
}
