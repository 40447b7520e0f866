//! The dual-head calibration network: shared MLP encoder, a class head with
//! row softmax, and a confidence head with sigmoid.
//!
//! Encoder: Linear -> BatchNorm -> ReLU -> Dropout -> Linear -> BatchNorm ->
//! ReLU, hidden width 64. Heads read the shared encoder output; both train
//! jointly (no stop-gradient between them).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{sigmoid, softmax_into, BatchStats, Tape, Var};
use crate::tensor::Tensor;

pub const HIDDEN_DIM: usize = 64;
pub const DROPOUT_P: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Weight on the old running statistic in the eval-mode update:
/// `running = BN_MOMENTUM * running + (1 - BN_MOMENTUM) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const CHECKPOINT_MAGIC: &str = "calib-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormLayer {
    fn identity(width: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::vector(vec![1.0; width]),
            beta: Tensor::vector(vec![0.0; width]),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }

    fn absorb(&mut self, stats: &BatchStats) {
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub input_dim: usize,
    pub num_classes: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub bn1: BatchNormLayer,
    pub w2: Tensor,
    pub b2: Tensor,
    pub bn2: BatchNormLayer,
    pub w_pred: Tensor,
    pub b_pred: Tensor,
    pub w_conf: Tensor,
    pub b_conf: Tensor,
}

/// Class probabilities and scalar confidence for a batch.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[n, K]`, rows sum to 1.
    pub class_probs: Tensor,
    /// `[n, 1]`, entries strictly inside (0, 1).
    pub confidence: Tensor,
}

impl ModelOutput {
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.class_probs.rows())
            .map(|i| argmax(self.class_probs.row(i)))
            .collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.confidence.data().to_vec()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// He-normal initialization (std = sqrt(2 / fan_in)), zero biases, identity
/// batchnorm. Deterministic per seed.
pub fn init_model(input_dim: usize, num_classes: usize, seed: u64) -> ModelParams {
    assert!(input_dim >= 1, "init_model: input_dim {input_dim} < 1");
    assert!(
        num_classes >= 2,
        "init_model: num_classes {num_classes} < 2"
    );
    let mut rng = Rng::substream(seed, 0x1217);
    let he = |rng: &mut Rng, rows: usize, cols: usize| {
        let std = (2.0 / rows as f64).sqrt();
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.normal() * std).collect(),
        )
    };
    ModelParams {
        input_dim,
        num_classes,
        w1: he(&mut rng, input_dim, HIDDEN_DIM),
        b1: Tensor::vector(vec![0.0; HIDDEN_DIM]),
        bn1: BatchNormLayer::identity(HIDDEN_DIM),
        w2: he(&mut rng, HIDDEN_DIM, HIDDEN_DIM),
        b2: Tensor::vector(vec![0.0; HIDDEN_DIM]),
        bn2: BatchNormLayer::identity(HIDDEN_DIM),
        w_pred: he(&mut rng, HIDDEN_DIM, num_classes),
        b_pred: Tensor::vector(vec![0.0; num_classes]),
        w_conf: he(&mut rng, HIDDEN_DIM, 1),
        b_conf: Tensor::vector(vec![0.0]),
    }
}

/// 1 - confidence, elementwise. The reward logic treats a sample as
/// "certain" when this falls below its threshold, so with the default 0.5
/// that is exactly confidence > 0.5. Deriving uncertainty from the class
/// margin instead would be an alternative reading; this crate keeps the
/// single confidence head authoritative.
pub fn uncertainty(output: &ModelOutput) -> Tensor {
    let data = output.confidence.data().iter().map(|c| 1.0 - c).collect();
    Tensor::new(output.confidence.shape().to_vec(), data)
}

/// Tape handles for all trainable leaves, in the fixed parameter order used
/// by the optimizer.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub w1: Var,
    pub b1: Var,
    pub g1: Var,
    pub be1: Var,
    pub w2: Var,
    pub b2: Var,
    pub g2: Var,
    pub be2: Var,
    pub w_pred: Var,
    pub b_pred: Var,
    pub w_conf: Var,
    pub b_conf: Var,
}

impl ParamVars {
    pub fn ordered(&self) -> [Var; 12] {
        [
            self.w1,
            self.b1,
            self.g1,
            self.be1,
            self.w2,
            self.b2,
            self.g2,
            self.be2,
            self.w_pred,
            self.b_pred,
            self.w_conf,
            self.b_conf,
        ]
    }
}

pub const PARAM_NAMES: [&str; 12] = [
    "w1",
    "b1",
    "bn1.gamma",
    "bn1.beta",
    "w2",
    "b2",
    "bn2.gamma",
    "bn2.beta",
    "w_pred",
    "b_pred",
    "w_conf",
    "b_conf",
];

impl ModelParams {
    pub fn ordered(&self) -> [&Tensor; 12] {
        [
            &self.w1,
            &self.b1,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.w2,
            &self.b2,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.w_pred,
            &self.b_pred,
            &self.w_conf,
            &self.b_conf,
        ]
    }

    pub fn ordered_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.w2,
            &mut self.b2,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.w_pred,
            &mut self.b_pred,
            &mut self.w_conf,
            &mut self.b_conf,
        ]
    }
}

pub fn register_params(tape: &mut Tape, p: &ModelParams) -> ParamVars {
    ParamVars {
        w1: tape.param(p.w1.clone()),
        b1: tape.param(p.b1.clone()),
        g1: tape.param(p.bn1.gamma.clone()),
        be1: tape.param(p.bn1.beta.clone()),
        w2: tape.param(p.w2.clone()),
        b2: tape.param(p.b2.clone()),
        g2: tape.param(p.bn2.gamma.clone()),
        be2: tape.param(p.bn2.beta.clone()),
        w_pred: tape.param(p.w_pred.clone()),
        b_pred: tape.param(p.b_pred.clone()),
        w_conf: tape.param(p.w_conf.clone()),
        b_conf: tape.param(p.b_conf.clone()),
    }
}

/// Taped forward pass outputs.
pub struct TapedForward {
    pub class_probs: Var,
    pub confidence: Var,
    pub logits: Var,
    pub bn1_stats: Option<BatchStats>,
    pub bn2_stats: Option<BatchStats>,
}

/// Train-mode forward on a tape: batch statistics for batchnorm, active
/// dropout drawing masks from `rng`. Requires at least two rows.
pub fn forward_train(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ModelParams,
    batch: Var,
    rng: &mut Rng,
) -> TapedForward {
    let n = tape.value(batch).rows();
    assert!(n >= 2, "forward: train mode needs >= 2 rows, got {n}");
    forward_on_tape(tape, vars, params, batch, true, rng)
}

/// Eval-mode forward on a tape: running statistics, dropout off. Used for
/// gradient checks of the full model in its deterministic configuration.
pub fn forward_eval_taped(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ModelParams,
    batch: Var,
) -> TapedForward {
    let mut rng = Rng::new(0);
    forward_on_tape(tape, vars, params, batch, false, &mut rng)
}

fn forward_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ModelParams,
    batch: Var,
    train: bool,
    rng: &mut Rng,
) -> TapedForward {
    let lin1 = tape.matmul(batch, vars.w1);
    let lin1 = tape.add_row(lin1, vars.b1);
    let (bn1, bn1_stats) = if train {
        let (v, s) = tape.batchnorm_train(lin1, vars.g1, vars.be1, BN_EPS);
        (v, Some(s))
    } else {
        let v = tape.batchnorm_eval(
            lin1,
            vars.g1,
            vars.be1,
            &params.bn1.running_mean,
            &params.bn1.running_var,
            BN_EPS,
        );
        (v, None)
    };
    let act1 = tape.relu(bn1);
    let drop1 = if train {
        tape.dropout(act1, DROPOUT_P, rng)
    } else {
        act1
    };

    let lin2 = tape.matmul(drop1, vars.w2);
    let lin2 = tape.add_row(lin2, vars.b2);
    let (bn2, bn2_stats) = if train {
        let (v, s) = tape.batchnorm_train(lin2, vars.g2, vars.be2, BN_EPS);
        (v, Some(s))
    } else {
        let v = tape.batchnorm_eval(
            lin2,
            vars.g2,
            vars.be2,
            &params.bn2.running_mean,
            &params.bn2.running_var,
            BN_EPS,
        );
        (v, None)
    };
    let features = tape.relu(bn2);

    let logits = tape.matmul(features, vars.w_pred);
    let logits = tape.add_row(logits, vars.b_pred);
    let class_probs = tape.softmax_rows(logits);

    let conf_z = tape.matmul(features, vars.w_conf);
    let conf_z = tape.add_row(conf_z, vars.b_conf);
    let confidence = tape.sigmoid(conf_z);

    TapedForward {
        class_probs,
        confidence,
        logits,
        bn1_stats,
        bn2_stats,
    }
}

/// Fold batch statistics from a train-mode forward into the running
/// estimates used by eval mode.
pub fn update_running_stats(params: &mut ModelParams, fwd: &TapedForward) {
    if let Some(s) = &fwd.bn1_stats {
        params.bn1.absorb(s);
    }
    if let Some(s) = &fwd.bn2_stats {
        params.bn2.absorb(s);
    }
}

/// Pure eval-mode forward: running statistics, no dropout, no tape. The same
/// input always produces the same output.
pub fn forward_eval(params: &ModelParams, batch: &Tensor) -> ModelOutput {
    assert_eq!(
        batch.cols(),
        params.input_dim,
        "forward: batch has {} features, model expects {}",
        batch.cols(),
        params.input_dim
    );
    assert!(batch.all_finite(), "forward: non-finite batch");
    let n = batch.rows();
    let h1 = dense_bn_relu(batch, &params.w1, &params.b1, &params.bn1);
    let h2 = dense_bn_relu(&h1, &params.w2, &params.b2, &params.bn2);

    let k = params.num_classes;
    let mut probs = vec![0.0; n * k];
    let mut conf = vec![0.0; n];
    for i in 0..n {
        let feats = h2.row(i);
        let mut logits = vec![0.0; k];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut acc = params.b_pred.data()[j];
            for (f, &h) in feats.iter().enumerate() {
                acc += h * params.w_pred.at(f, j);
            }
            *l = acc;
        }
        softmax_into(&logits, &mut probs[i * k..(i + 1) * k]);

        let mut z = params.b_conf.data()[0];
        for (f, &h) in feats.iter().enumerate() {
            z += h * params.w_conf.at(f, 0);
        }
        conf[i] = sigmoid(z);
    }
    ModelOutput {
        class_probs: Tensor::new(vec![n, k], probs),
        confidence: Tensor::column(conf),
    }
}

fn dense_bn_relu(x: &Tensor, w: &Tensor, b: &Tensor, bn: &BatchNormLayer) -> Tensor {
    let (n, d, h) = (x.rows(), x.cols(), w.cols());
    let mut out = vec![0.0; n * h];
    for i in 0..n {
        let xrow = x.row(i);
        let orow = &mut out[i * h..(i + 1) * h];
        orow.copy_from_slice(b.data());
        for (dd, &xv) in xrow.iter().enumerate().take(d) {
            let wrow = &w.data()[dd * h..(dd + 1) * h];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
        for (j, o) in orow.iter_mut().enumerate() {
            let inv = 1.0 / (bn.running_var[j] + BN_EPS).sqrt();
            let normed = (*o - bn.running_mean[j]) * inv;
            *o = (bn.gamma.data()[j] * normed + bn.beta.data()[j]).max(0.0);
        }
    }
    Tensor::new(vec![n, h], out)
}

// ---- checkpoint io ------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    magic: String,
    version: u32,
    input_dim: usize,
    num_classes: usize,
    tensors: BTreeMap<String, CheckpointTensor>,
}

fn ck(t: &Tensor) -> CheckpointTensor {
    CheckpointTensor {
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (name, t) in PARAM_NAMES.iter().zip(params.ordered()) {
        tensors.insert(name.to_string(), ck(t));
    }
    tensors.insert(
        "bn1.running_mean".into(),
        ck(&Tensor::vector(params.bn1.running_mean.clone())),
    );
    tensors.insert(
        "bn1.running_var".into(),
        ck(&Tensor::vector(params.bn1.running_var.clone())),
    );
    tensors.insert(
        "bn2.running_mean".into(),
        ck(&Tensor::vector(params.bn2.running_mean.clone())),
    );
    tensors.insert(
        "bn2.running_var".into(),
        ck(&Tensor::vector(params.bn2.running_var.clone())),
    );
    let checkpoint = Checkpoint {
        magic: CHECKPOINT_MAGIC.into(),
        version: CHECKPOINT_VERSION,
        input_dim: params.input_dim,
        num_classes: params.num_classes,
        tensors,
    };
    let json = serde_json::to_string(&checkpoint)?;
    std::fs::write(path, json).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    parse_checkpoint(&text)
}

/// Parse and validate a checkpoint from its JSON text. Shape, finiteness,
/// and running-variance invariants are all enforced before a model is
/// produced.
pub fn parse_checkpoint(text: &str) -> Result<ModelParams> {
    let raw: Checkpoint = serde_json::from_str(text)?;
    if raw.magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}", raw.magic)));
    }
    if raw.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            raw.version
        )));
    }
    if raw.input_dim < 1 || raw.num_classes < 2 {
        return Err(Error::Checkpoint(format!(
            "bad dims: input_dim {}, num_classes {}",
            raw.input_dim, raw.num_classes
        )));
    }
    let take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = raw
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        if t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                t.shape, shape
            )));
        }
        let numel: usize = shape.iter().product();
        if t.data.len() != numel {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has {} values for shape {:?}",
                t.data.len(),
                shape
            )));
        }
        if !t.data.iter().all(|x| x.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has non-finite values"
            )));
        }
        Ok(Tensor::new(shape.to_vec(), t.data.clone()))
    };
    let vec_field =
        |name: &str| -> Result<Vec<f64>> { Ok(take(name, &[HIDDEN_DIM])?.data().to_vec()) };
    let (d, k, h) = (raw.input_dim, raw.num_classes, HIDDEN_DIM);
    let bn1_var = vec_field("bn1.running_var")?;
    let bn2_var = vec_field("bn2.running_var")?;
    if bn1_var.iter().chain(&bn2_var).any(|&v| v < 0.0) {
        return Err(Error::Checkpoint("negative running variance".into()));
    }
    Ok(ModelParams {
        input_dim: d,
        num_classes: k,
        w1: take("w1", &[d, h])?,
        b1: take("b1", &[h])?,
        bn1: BatchNormLayer {
            gamma: take("bn1.gamma", &[h])?,
            beta: take("bn1.beta", &[h])?,
            running_mean: vec_field("bn1.running_mean")?,
            running_var: bn1_var,
        },
        w2: take("w2", &[h, h])?,
        b2: take("b2", &[h])?,
        bn2: BatchNormLayer {
            gamma: take("bn2.gamma", &[h])?,
            beta: take("bn2.beta", &[h])?,
            running_mean: vec_field("bn2.running_mean")?,
            running_var: bn2_var,
        },
        w_pred: take("w_pred", &[h, k])?,
        b_pred: take("b_pred", &[k])?,
        w_conf: take("w_conf", &[h, 1])?,
        b_conf: take("b_conf", &[1])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    #[test]
    fn init_deterministic_per_seed() {
        let a = init_model(2, 2, 42);
        let b = init_model(2, 2, 42);
        assert_eq!(a, b);
        let c = init_model(2, 2, 43);
        assert_ne!(a.w1, c.w1);
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let p = init_model(2, 2, 1);
        assert_eq!(p.w_pred.shape(), &[64, 2]);
        assert_eq!(p.w1.shape(), &[2, 64]);
        assert_eq!(p.w_conf.shape(), &[64, 1]);
        assert!(p.b1.data().iter().all(|&x| x == 0.0));
        assert!(p.b_pred.data().iter().all(|&x| x == 0.0));
        assert!(p.b_conf.data().iter().all(|&x| x == 0.0));
        assert!(p.bn1.gamma.data().iter().all(|&x| x == 1.0));
        assert!(p.bn1.beta.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    #[should_panic(expected = "num_classes")]
    fn init_rejects_single_class() {
        let _ = init_model(2, 1, 0);
    }

    #[test]
    fn eval_rows_stochastic_and_deterministic() {
        let p = init_model(2, 3, 7);
        let batch = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![-0.5, 0.75]]);
        let out1 = forward_eval(&p, &batch);
        let out2 = forward_eval(&p, &batch);
        assert_eq!(out1.class_probs, out2.class_probs);
        assert_eq!(out1.confidence, out2.confidence);
        for i in 0..3 {
            let s: f64 = out1.class_probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let c = out1.confidence.data()[i];
            assert!(c > 0.0 && c < 1.0);
        }
    }

    #[test]
    fn zero_conf_head_gives_half_confidence() {
        let mut p = init_model(2, 2, 3);
        p.w_conf = Tensor::zeros(vec![64, 1]);
        p.b_conf = Tensor::vector(vec![0.0]);
        let batch = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let out = forward_eval(&p, &batch);
        assert_eq!(out.confidence.data(), &[0.5, 0.5]);
    }

    #[test]
    fn uncertainty_is_complement() {
        let p = init_model(2, 2, 9);
        let batch = Tensor::from_rows(&[vec![0.3, 0.4], vec![1.5, -0.2]]);
        let out = forward_eval(&p, &batch);
        let u = uncertainty(&out);
        for (c, uu) in out.confidence.data().iter().zip(u.data()) {
            assert!((c + uu - 1.0).abs() < 1e-15);
        }
        // A fixed confidence of 0.8 complements to 0.2; 0.5 sits exactly on
        // the certain/uncertain boundary.
        let fixed = ModelOutput {
            class_probs: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]),
            confidence: Tensor::column(vec![0.8, 0.5]),
        };
        assert_eq!(uncertainty(&fixed).data(), &[0.19999999999999996, 0.5]);
    }

    #[test]
    fn taped_eval_matches_pure_eval() {
        let p = init_model(2, 2, 21);
        let batch = Tensor::from_rows(&[vec![0.1, -0.7], vec![1.0, 0.3], vec![-1.2, 0.9]]);
        let pure = forward_eval(&p, &batch);
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &p);
        let b = tape.constant(batch.clone());
        let fwd = forward_eval_taped(&mut tape, &vars, &p, b);
        let taped_probs = tape.value(fwd.class_probs);
        for (a, b) in pure.class_probs.data().iter().zip(taped_probs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let taped_conf = tape.value(fwd.confidence);
        for (a, b) in pure.confidence.data().iter().zip(taped_conf.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_forward_requires_two_rows() {
        let p = init_model(2, 2, 5);
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &p);
        let b = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            forward_train(&mut tape, &vars, &p, b, &mut Rng::new(0))
        }));
        assert!(result.is_err());
    }

    #[test]
    fn full_model_cross_entropy_grad_check() {
        // Full forward in train mode (fixed dropout mask) through a
        // cross-entropy-style loss, against central differences. Leaves are
        // anchored so dead-unit coordinates stay resolvable.
        let p = init_model(2, 2, 77);
        let mut data_rng = Rng::new(77 * 7 + 1);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                vec![
                    data_rng.uniform_in(-1.5, 1.5),
                    data_rng.uniform_in(-1.5, 1.5),
                ]
            })
            .collect();
        let batch = Tensor::from_rows(&rows);
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let tensors: Vec<Tensor> = p.ordered().iter().map(|t| (*t).clone()).collect();
        let model = p.clone();
        let build = move |tape: &mut Tape, vars: &[crate::tape::Var]| {
            let pv = ParamVars {
                w1: vars[0],
                b1: vars[1],
                g1: vars[2],
                be1: vars[3],
                w2: vars[4],
                b2: vars[5],
                g2: vars[6],
                be2: vars[7],
                w_pred: vars[8],
                b_pred: vars[9],
                w_conf: vars[10],
                b_conf: vars[11],
            };
            let b = tape.constant(batch.clone());
            let mut rng = Rng::new(3);
            let fwd = forward_train(tape, &pv, &model, b, &mut rng);
            let picked = tape.pick_per_row(fwd.class_probs, &labels);
            let clamped = tape.clamp_min(picked, 1e-12);
            let logp = tape.log(clamped);
            let m = tape.mean(logp);
            let ce = tape.mul_scalar(m, -1.0);
            // Fold the confidence head in so its parameters get gradients.
            let conf_sq = tape.square(fwd.confidence);
            let conf_term = tape.mean(conf_sq);
            let loss = tape.add(ce, conf_term);
            crate::tape::anchor_leaves(tape, vars, loss)
        };
        let err = grad_check(build, &tensors, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join("calib-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        let mut p = init_model(3, 4, 11);
        p.bn1.running_mean[5] = 0.25;
        p.bn2.running_var[7] = 2.5;
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_shapes() {
        let p = init_model(2, 2, 1);
        let dir = std::env::temp_dir().join("calib-model-test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        save_checkpoint(&p, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        let bad_magic = text.replace(CHECKPOINT_MAGIC, "other-format");
        assert!(matches!(
            parse_checkpoint(&bad_magic),
            Err(Error::Checkpoint(_))
        ));

        let bad_shape = text.replace("\"input_dim\":2", "\"input_dim\":5");
        assert!(matches!(
            parse_checkpoint(&bad_shape),
            Err(Error::Checkpoint(_))
        ));

        assert!(parse_checkpoint("{}").is_err());
        assert!(parse_checkpoint("not json").is_err());
    }
}
