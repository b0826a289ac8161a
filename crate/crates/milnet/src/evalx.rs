//! Evaluation metrics, the cross-validation runner, and the sweep protocols
//! (head counts, instance-level pooling modes, loss comparison).

use rayon::prelude::*;
use thiserror::Error;

use crate::bagdata::{
    splits_digest, stratified_kfold, Bag, DataError, FoldSplit, Vocabulary,
};
use crate::model::{InstancePooling, ModelConfig, ModelError};
use crate::trainer::{score_bags, train, LossKind, TrainConfig, TrainError, TrainHistory};
use crate::model::ParameterSet;
use crate::util::derive_seed;

/// Default decision threshold; scores at or above it predict the positive class.
pub const CLASSIFICATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels have different lengths: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC undefined: only one class present")]
    SingleClass,
    #[error("sweep arm {arm}: {message}")]
    BadArm { arm: String, message: String },
    #[error(transparent)]
    Train(Box<TrainError>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

// ---- metrics ------------------------------------------------------------------

/// Area under the ROC curve via midranks, which equals the pairwise
/// probability P(score_pos > score_neg) + 0.5 P(score_pos = score_neg).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // midranks over tie groups, then sum the positive ranks
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Confusion counts and derived ratios at a decision threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Prediction rule: score >= threshold. Precision and recall fall back to 0
/// when their denominators are empty.
pub fn confusion_metrics(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<ConfusionMetrics, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&score, &label) in scores.iter().zip(labels.iter()) {
        let predicted = score >= threshold;
        match (predicted, label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let total = (tp + fp + tn + fn_) as f64;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(ConfusionMetrics {
        tp,
        fp,
        tn,
        fn_,
        accuracy: if total == 0.0 { 0.0 } else { (tp + tn) as f64 / total },
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    })
}

/// Metrics for one fold run, with provenance for the report table.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub model: String,
    pub loss: String,
    pub heads: usize,
    pub pooling: String,
    pub repetition: usize,
    pub fold: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub config_digest: String,
}

pub const REPORT_HEADER: &str =
    "model,loss,heads,pooling,repetition,fold,auc,accuracy,precision,recall,tp,fp,tn,fn";

/// Fixed-column CSV of per-fold reports, sorted by (repetition, fold).
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut rows: Vec<&MetricsReport> = reports.iter().collect();
    rows.sort_by_key(|r| (r.model.clone(), r.loss.clone(), r.heads, r.pooling.clone(), r.repetition, r.fold));
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{}\n",
            r.model,
            r.loss,
            r.heads,
            r.pooling,
            r.repetition,
            r.fold,
            r.auc,
            r.accuracy,
            r.precision,
            r.recall,
            r.tp,
            r.fp,
            r.tn,
            r.fn_
        ));
    }
    out
}

/// Mean and sample standard deviation of each metric over the fold runs.
#[derive(Debug, Clone, Copy)]
pub struct Aggregate {
    pub runs: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_precision: f64,
    pub std_precision: f64,
    pub mean_recall: f64,
    pub std_recall: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(reports: &[MetricsReport]) -> Aggregate {
    let pick = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let (mean_auc, std_auc) = mean_std(&pick(|r| r.auc));
    let (mean_accuracy, std_accuracy) = mean_std(&pick(|r| r.accuracy));
    let (mean_precision, std_precision) = mean_std(&pick(|r| r.precision));
    let (mean_recall, std_recall) = mean_std(&pick(|r| r.recall));
    Aggregate {
        runs: reports.len(),
        mean_auc,
        std_auc,
        mean_accuracy,
        std_accuracy,
        mean_precision,
        std_precision,
        mean_recall,
        std_recall,
    }
}

// ---- cross-validation ----------------------------------------------------------

/// Retained per-fold training artifacts, enough to re-score the validation
/// fold (used by the interpretability checks and the predict command).
#[derive(Debug, Clone)]
pub struct FoldArtifact {
    pub repetition: usize,
    pub fold: usize,
    pub params: ParameterSet,
    pub val_indices: Vec<usize>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub reports: Vec<MetricsReport>,
    pub aggregate: Aggregate,
    pub folds: Vec<FoldArtifact>,
    pub splits_digest: String,
}

/// Stratified k-fold cross-validation with `repetitions` reshuffles: train on
/// each training split (early-stopping on the validation fold's AUC), then
/// report metrics on that fold. Per-fold metrics are averaged; fold runs
/// execute in parallel with seeds derived from the master seed, so parallel
/// and serial execution agree bit for bit.
pub fn cv_run(
    bags: &[Bag],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    k: usize,
    repetitions: usize,
    seed: u64,
) -> Result<CvOutcome, EvalError> {
    let vocab = Vocabulary::build(bags);
    let splits = stratified_kfold(bags, k, repetitions, derive_seed(seed, &[0xF0]))?;
    cv_run_with_splits(
        bags,
        &vocab,
        &splits,
        model_config,
        train_config,
        seed,
        CLASSIFICATION_THRESHOLD,
    )
}

/// Same but over precomputed splits and a shared vocabulary, which is how the
/// sweeps pair their arms.
#[allow(clippy::too_many_arguments)]
pub fn cv_run_with_splits(
    bags: &[Bag],
    vocab: &Vocabulary,
    splits: &[FoldSplit],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
    threshold: f64,
) -> Result<CvOutcome, EvalError> {
    let mut model_config = model_config.clone();
    model_config.vocab_size = vocab.table_rows();
    model_config.validate()?;
    train_config.validate().map_err(EvalError::from)?;
    let digest_value = splits_digest(splits);
    let results: Result<Vec<(MetricsReport, FoldArtifact)>, EvalError> = splits
        .par_iter()
        .map(|split| {
            let train_bags: Vec<Bag> = split.train.iter().map(|&i| bags[i].clone()).collect();
            let val_bags: Vec<Bag> = split.val.iter().map(|&i| bags[i].clone()).collect();
            let mut fold_model = model_config.clone();
            fold_model.seed = derive_seed(seed, &[split.repetition as u64, split.fold as u64, 1]);
            let mut fold_train = train_config.clone();
            fold_train.seed = derive_seed(seed, &[split.repetition as u64, split.fold as u64, 2]);
            let (params, history) =
                train(&train_bags, &val_bags, vocab, &fold_model, &fold_train)?;
            let (scores, labels, _) = score_bags(
                &params,
                &fold_model,
                vocab,
                &val_bags,
                fold_train.batch_size,
            )?;
            let auc = roc_auc(&scores, &labels)?;
            let cm = confusion_metrics(&scores, &labels, threshold)?;
            let report = MetricsReport {
                model: fold_model.model_kind.to_string(),
                loss: fold_train.loss_kind.to_string(),
                heads: fold_model.num_heads,
                pooling: fold_model.instance_pooling.to_string(),
                repetition: split.repetition,
                fold: split.fold,
                auc,
                accuracy: cm.accuracy,
                precision: cm.precision,
                recall: cm.recall,
                tp: cm.tp,
                fp: cm.fp,
                tn: cm.tn,
                fn_: cm.fn_,
                config_digest: fold_model.digest(),
            };
            let artifact = FoldArtifact {
                repetition: split.repetition,
                fold: split.fold,
                params,
                val_indices: split.val.clone(),
                history,
            };
            Ok((report, artifact))
        })
        .collect();
    let mut reports = Vec::with_capacity(splits.len());
    let mut folds = Vec::with_capacity(splits.len());
    for (report, artifact) in results? {
        reports.push(report);
        folds.push(artifact);
    }
    let aggregate = aggregate(&reports);
    Ok(CvOutcome {
        reports,
        aggregate,
        folds,
        splits_digest: digest_value,
    })
}

// ---- sweeps ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub arm: String,
    pub outcome: CvOutcome,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub kind: &'static str,
    pub rows: Vec<SweepRow>,
    pub splits_digest: String,
}

impl SweepTable {
    /// Two-column summary (arm, mean AUC) the sweep protocols report.
    pub fn summary(&self) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .map(|r| (r.arm.clone(), r.outcome.aggregate.mean_auc))
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "arm,runs,mean_auc,std_auc,mean_accuracy,mean_precision,mean_recall,aggregation\n",
        );
        for row in &self.rows {
            let a = &row.outcome.aggregate;
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},per_fold_mean\n",
                row.arm,
                a.runs,
                a.mean_auc,
                a.std_auc,
                a.mean_accuracy,
                a.mean_precision,
                a.mean_recall
            ));
        }
        out
    }

    pub fn all_reports(&self) -> Vec<MetricsReport> {
        self.rows
            .iter()
            .flat_map(|r| r.outcome.reports.iter().cloned())
            .collect()
    }
}

fn shared_splits(
    bags: &[Bag],
    k: usize,
    repetitions: usize,
    seed: u64,
) -> Result<(Vocabulary, Vec<FoldSplit>), EvalError> {
    let vocab = Vocabulary::build(bags);
    let splits = stratified_kfold(bags, k, repetitions, derive_seed(seed, &[0xF0]))?;
    Ok((vocab, splits))
}

/// One cross-validation run per head count, over identical fold assignments.
/// Head count 0 bypasses the attention block.
#[allow(clippy::too_many_arguments)]
pub fn sweep_heads(
    bags: &[Bag],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    head_counts: &[usize],
    k: usize,
    repetitions: usize,
    seed: u64,
    threshold: f64,
) -> Result<SweepTable, EvalError> {
    let (vocab, splits) = shared_splits(bags, k, repetitions, seed)?;
    for &heads in head_counts {
        if heads > 0 && base_model.d_model % heads != 0 {
            return Err(EvalError::BadArm {
                arm: heads.to_string(),
                message: format!("{} does not divide d_model {}", heads, base_model.d_model),
            });
        }
    }
    let mut rows = Vec::new();
    let digest = splits_digest(&splits);
    for &heads in head_counts {
        let mut model = base_model.clone();
        model.num_heads = heads;
        let outcome =
            cv_run_with_splits(bags, &vocab, &splits, &model, base_train, seed, threshold)?;
        assert_eq!(outcome.splits_digest, digest, "arms must share fold assignments");
        rows.push(SweepRow {
            arm: heads.to_string(),
            outcome,
        });
    }
    Ok(SweepTable {
        kind: "heads",
        rows,
        splits_digest: digest,
    })
}

/// One cross-validation run per instance-level pooling mode, paired splits.
#[allow(clippy::too_many_arguments)]
pub fn sweep_pooling(
    bags: &[Bag],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    modes: &[InstancePooling],
    k: usize,
    repetitions: usize,
    seed: u64,
    threshold: f64,
) -> Result<SweepTable, EvalError> {
    let (vocab, splits) = shared_splits(bags, k, repetitions, seed)?;
    let digest = splits_digest(&splits);
    let mut rows = Vec::new();
    for &mode in modes {
        let mut model = base_model.clone();
        model.instance_pooling = mode;
        let outcome =
            cv_run_with_splits(bags, &vocab, &splits, &model, base_train, seed, threshold)?;
        assert_eq!(outcome.splits_digest, digest, "arms must share fold assignments");
        rows.push(SweepRow {
            arm: mode.to_string(),
            outcome,
        });
    }
    Ok(SweepTable {
        kind: "pooling",
        rows,
        splits_digest: digest,
    })
}

/// Paired comparison of the two loss kinds on identical splits.
#[allow(clippy::too_many_arguments)]
pub fn compare_losses(
    bags: &[Bag],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    k: usize,
    repetitions: usize,
    seed: u64,
    threshold: f64,
) -> Result<SweepTable, EvalError> {
    let (vocab, splits) = shared_splits(bags, k, repetitions, seed)?;
    let digest = splits_digest(&splits);
    let mut rows = Vec::new();
    for kind in LossKind::ALL {
        let mut train_config = base_train.clone();
        train_config.loss_kind = kind;
        let outcome = cv_run_with_splits(
            bags,
            &vocab,
            &splits,
            base_model,
            &train_config,
            seed,
            threshold,
        )?;
        assert_eq!(outcome.splits_digest, digest, "arms must share fold assignments");
        rows.push(SweepRow {
            arm: kind.to_string(),
            outcome,
        });
    }
    Ok(SweepTable {
        kind: "loss",
        rows,
        splits_digest: digest,
    })
}
