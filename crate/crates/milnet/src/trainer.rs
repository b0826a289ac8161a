//! Loss functions, the Adam optimizer, and the training loop with AUC-based
//! early stopping.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::prelude::*;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, ReduceOp, Tape, TensorId};
use crate::bagdata::{batchify, Bag, DataError, Vocabulary};
use crate::evalx::EvalError;
use crate::model::{
    forward, ModelConfig, ModelError, ParameterSet, EMBEDDING_PARAM, PROB_EPSILON,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("validation set holds a single class: AUC undefined")]
    SingleClassValidation,
    #[error("{side} set is empty")]
    EmptySet { side: &'static str },
    #[error("gradient missing for parameter {0}")]
    MissingGradient(String),
    #[error("parameter {param}: shapes of value/gradient/state disagree")]
    StateShapeMismatch { param: String },
    #[error("parameter {param} became non-finite after an optimizer step")]
    NonFinite { param: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which objective the training loop minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Focal,
    CrossEntropy,
}

impl LossKind {
    pub const ALL: [LossKind; 2] = [LossKind::Focal, LossKind::CrossEntropy];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Focal => "focal",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossKind::ALL
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown loss kind {s:?}"))
    }
}

/// Optimization hyperparameters (defaults follow the reference setup).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub loss_kind: LossKind,
    pub alpha: f64,
    pub gamma: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            batch_size: 512,
            max_epochs: 200,
            loss_kind: LossKind::Focal,
            alpha: 0.25,
            gamma: 2.0,
            early_stop_patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return fail(format!(
                "beta1 and beta2 must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.gamma >= 0.0) {
            return fail(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return fail("batch_size, max_epochs, and early_stop_patience must be positive".into());
        }
        Ok(())
    }
}

// ---- losses -----------------------------------------------------------------

/// Focal loss for one prediction: -alpha * (1 - p_t)^gamma * log(p_t), where
/// p_t is the probability assigned to the true class. The prediction is
/// clamped into [PROB_EPSILON, 1 - PROB_EPSILON] first.
pub fn focal_loss(y_pred: f64, y_true: u8, alpha: f64, gamma: f64) -> Result<f64, TrainError> {
    if y_true > 1 {
        return Err(TrainError::BadLabel(y_true));
    }
    let p = y_pred.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    let p_t = if y_true == 1 { p } else { 1.0 - p };
    Ok(-alpha * (1.0 - p_t).powf(gamma) * p_t.ln())
}

/// Binary cross-entropy with the same clamping as [`focal_loss`].
pub fn cross_entropy(y_pred: f64, y_true: u8) -> Result<f64, TrainError> {
    if y_true > 1 {
        return Err(TrainError::BadLabel(y_true));
    }
    let p = y_pred.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    Ok(-(y_true as f64 * p.ln() + (1.0 - y_true as f64) * (1.0 - p).ln()))
}

/// Records one bag's loss on the tape. `prob` must already be clamped away
/// from 0 and 1 (the scorer guarantees this), so both logarithms are safe.
pub fn loss_on_tape(
    tape: &mut Tape,
    prob: TensorId,
    y_true: u8,
    kind: LossKind,
    alpha: f64,
    gamma: f64,
) -> Result<TensorId, TrainError> {
    if y_true > 1 {
        return Err(TrainError::BadLabel(y_true));
    }
    let one = tape.constant(vec![1.0; tape.value(prob).len()], tape.shape_of(prob).to_vec().as_slice())?;
    let p_t = if y_true == 1 {
        prob
    } else {
        tape.sub(one, prob)?
    };
    match kind {
        LossKind::Focal => {
            let log_pt = tape.log(p_t)?;
            let one_minus = tape.sub(one, p_t)?;
            let log_om = tape.log(one_minus)?;
            let powed = tape.scale(log_om, gamma)?;
            let powed = tape.exp(powed)?;
            let product = tape.mul(powed, log_pt)?;
            Ok(tape.scale(product, -alpha)?)
        }
        LossKind::CrossEntropy => {
            let log_pt = tape.log(p_t)?;
            Ok(tape.negate(log_pt)?)
        }
    }
}

/// Mean loss over a batch of per-bag probability nodes.
pub fn batch_mean_loss(
    tape: &mut Tape,
    probs: &[TensorId],
    labels: &[u8],
    kind: LossKind,
    alpha: f64,
    gamma: f64,
) -> Result<TensorId, TrainError> {
    debug_assert_eq!(probs.len(), labels.len());
    let mut parts = Vec::with_capacity(probs.len());
    for (&prob, &label) in probs.iter().zip(labels.iter()) {
        let loss = loss_on_tape(tape, prob, label, kind, alpha, gamma)?;
        parts.push(tape.reshape(loss, &[1])?);
    }
    let stacked = tape.concat(&parts, 0)?;
    Ok(tape.reduce(ReduceOp::Mean, stacked, 0, None)?)
}

// ---- optimizer ----------------------------------------------------------------

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = |t: &crate::autograd::Tensor| vec![0.0; t.numel()];
        AdamState {
            m: params.tensors().iter().map(|(n, t)| (n.clone(), zeros(t))).collect(),
            v: params.tensors().iter().map(|(n, t)| (n.clone(), zeros(t))).collect(),
        }
    }
}

/// One Adam update with bias correction:
/// m <- b1 m + (1-b1) g, v <- b2 v + (1-b2) g^2,
/// theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
/// The pad embedding row is excluded from updates.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    t: u64,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    assert!(t >= 1, "step index is 1-based");
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    for name in names {
        let tensor = params.get_mut(&name).expect("name from iteration");
        let grad = grads
            .get(&name)
            .ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        let m = state.m.get_mut(&name).expect("state initialized per param");
        let v = state.v.get_mut(&name).expect("state initialized per param");
        if grad.len() != tensor.numel() || m.len() != tensor.numel() || v.len() != tensor.numel() {
            return Err(TrainError::StateShapeMismatch { param: name });
        }
        // pad row of the embedding never moves
        let frozen_prefix = if name == EMBEDDING_PARAM {
            tensor.shape()[1]
        } else {
            0
        };
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = if i < frozen_prefix { 0.0 } else { grad[i] };
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        if !tensor.is_finite() {
            return Err(TrainError::NonFinite { param: name });
        }
    }
    Ok(())
}

// ---- training loop -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

/// Per-epoch trace plus the index of the retained best epoch (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_auc(&self) -> f64 {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map(|e| e.val_auc)
            .unwrap_or(f64::NAN)
    }

    /// Comma-separated table: epoch, train_loss, val_auc, is_best.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_auc,is_best\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.9},{:.9},{}\n",
                e.epoch,
                e.train_loss,
                e.val_auc,
                (e.epoch == self.best_epoch) as u8
            ));
        }
        out
    }
}

/// Early-stopping tracker: stop once the patience budget passes with no
/// strict improvement of validation AUC. On an exact tie with the running
/// best the retained parameters are refreshed (the latest tied epoch is the
/// better-calibrated one) but the tie still consumes patience.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            since_best: 0,
        }
    }

    /// Returns (retain_this_epoch, should_stop).
    pub fn observe(&mut self, val_auc: f64) -> (bool, bool) {
        if val_auc > self.best {
            self.best = val_auc;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            let stop = self.since_best >= self.patience;
            (val_auc == self.best, stop)
        }
    }
}

/// Loss builder over a fixed batch, for gradient-checking a full model.
pub fn model_loss_builder<'a>(
    batch: &'a crate::bagdata::BatchedBags,
    model_config: &'a ModelConfig,
    train_config: &'a TrainConfig,
) -> impl Fn(&mut Tape, &BTreeMap<String, TensorId>) -> Result<TensorId, TrainError> + 'a {
    move |tape, ids| {
        let bound = crate::model::BoundParams::from_ids(ids.clone());
        let out = forward(tape, batch, &bound, model_config)?;
        batch_mean_loss(
            tape,
            &out.probs,
            &batch.labels,
            train_config.loss_kind,
            train_config.alpha,
            train_config.gamma,
        )
    }
}

/// The reference gradient-check setup: a tiny full model (8-dim embeddings,
/// 2 heads, FFN sizes 6 and 4) over a fixed three-bag batch with padding.
/// `corrupt` optionally perturbs one parameter's analytic gradient so the
/// checker's negative path stays honest.
pub fn reference_gradcheck(
    step: f64,
    tolerance: f64,
    corrupt: Option<&str>,
) -> Result<crate::autograd::GradCheckReport, TrainError> {
    let bags = vec![
        Bag {
            id: "g1".into(),
            tokens: vec!["fever".into(), "cough".into(), "rash".into(), "cough".into()],
            label: 1,
        },
        Bag {
            id: "g2".into(),
            tokens: vec!["chills".into(), "ache".into()],
            label: 0,
        },
        Bag {
            id: "g3".into(),
            tokens: vec!["rash".into(), "ache".into(), "sweats".into()],
            label: 1,
        },
    ];
    let vocab = Vocabulary::build(&bags);
    let model_config = ModelConfig {
        vocab_size: vocab.table_rows(),
        d_model: 8,
        num_heads: 2,
        fc_dims: vec![6, 4],
        seed: 12,
        ..ModelConfig::new(vocab.table_rows())
    };
    let train_config = TrainConfig::default();
    let params = ParameterSet::init(&model_config, model_config.seed)?;
    let batch = batchify(&bags, &vocab, bags.len())?.remove(0);
    let builder = model_loss_builder(&batch, &model_config, &train_config);
    crate::autograd::gradcheck_with_corruption(
        &builder,
        params.tensors(),
        step,
        tolerance,
        corrupt,
    )
}

/// Forward-only scoring of a bag list; returns per-bag probabilities, labels,
/// and instance attention weights (empty per bag for kinds without them).
pub fn score_bags(
    params: &ParameterSet,
    model_config: &ModelConfig,
    vocab: &Vocabulary,
    bags: &[Bag],
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<u8>, Vec<Vec<f64>>), TrainError> {
    let mut scores = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    let mut attention = Vec::with_capacity(bags.len());
    for batch in batchify(bags, vocab, batch_size)? {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = forward(&mut tape, &batch, &bound, model_config)?;
        scores.extend(out.prob_values);
        labels.extend(batch.labels.iter().copied());
        attention.extend(out.attention);
    }
    Ok((scores, labels, attention))
}

/// Trains with shuffled mini-batches and retains the parameters from the
/// epoch with the best validation AUC. Stops after `early_stop_patience`
/// epochs without improvement or at `max_epochs`, whichever comes first.
pub fn train(
    train_bags: &[Bag],
    val_bags: &[Bag],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ParameterSet, TrainHistory), TrainError> {
    train_config.validate()?;
    model_config.validate().map_err(TrainError::Model)?;
    if train_bags.is_empty() {
        return Err(TrainError::EmptySet { side: "train" });
    }
    if val_bags.is_empty() {
        return Err(TrainError::EmptySet { side: "validation" });
    }
    let has = |label: u8| val_bags.iter().any(|b| b.label == label);
    if !has(0) || !has(1) {
        return Err(TrainError::SingleClassValidation);
    }

    let mut params = ParameterSet::init(model_config, model_config.seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut stopper = EarlyStopper::new(train_config.early_stop_patience);
    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut step = 0u64;

    for epoch in 1..=train_config.max_epochs {
        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<Bag> = order.iter().map(|&i| train_bags[i].clone()).collect();

        let mut loss_sum = 0.0;
        for batch in batchify(&shuffled, vocab, train_config.batch_size)? {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let out = forward(&mut tape, &batch, &bound, model_config)?;
            let loss = batch_mean_loss(
                &mut tape,
                &out.probs,
                &batch.labels,
                train_config.loss_kind,
                train_config.alpha,
                train_config.gamma,
            )?;
            let loss_value = tape.item(loss);
            tape.backward(loss)?;
            let mut grads = BTreeMap::new();
            for (name, id) in bound.ids() {
                let grad = tape
                    .grad(*id)
                    .ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
                grads.insert(name.clone(), grad.to_vec());
            }
            step += 1;
            adam_step(&mut params, &grads, &mut state, step, train_config)?;
            loss_sum += loss_value * batch.batch as f64;
        }
        let train_loss = loss_sum / train_bags.len() as f64;

        let (scores, labels, _) = score_bags(
            &params,
            model_config,
            vocab,
            val_bags,
            train_config.batch_size,
        )?;
        let val_auc = crate::evalx::roc_auc(&scores, &labels)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auc,
        });
        let (new_best, stop) = stopper.observe(val_auc);
        if new_best {
            best_params = params.clone();
            best_epoch = epoch;
        }
        if stop {
            break;
        }
    }
    Ok((
        best_params,
        TrainHistory {
            epochs: history,
            best_epoch,
        },
    ))
}
