//! Command-line entry point: training, evaluation, sweeps, single-bag
//! prediction with attention weights, gradient checking, and synthetic
//! dataset generation.
//!
//! Settings come from a TOML config file (`--config`) with sections
//! `[model]`, `[train]`, `[data]`, `[run]`; command-line flags override file
//! values, and every file-writing command echoes its effective configuration
//! into the output directory so a run can be reproduced from the echo alone.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bagdata::{
    load_jsonl, stratified_holdout, synth_generate, to_jsonl, Bag, DataError, SynthSpec,
    Vocabulary,
};
use crate::evalx::{
    compare_losses, confusion_metrics, reports_to_csv, roc_auc, sweep_heads, sweep_pooling,
    EvalError, MetricsReport, SweepTable, CLASSIFICATION_THRESHOLD,
};
use crate::model::{
    load_checkpoint, save_checkpoint, InstancePooling, ModelConfig, ModelError, PoolView,
};
use crate::trainer::{reference_gradcheck, score_bags, train, TrainConfig, TrainError};
use crate::util::{derive_seed, write_atomic};

const DEFAULT_OUT_DIR: &str = "milnet_out";
const DEFAULT_VAL_FRACTION: f64 = 0.2;

// ---- error categories -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Config,
    Data,
    Numeric,
}

impl Category {
    fn name(&self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Numeric => "numeric",
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            Category::Config | Category::Data => 2,
            Category::Numeric => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    category: Category,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            category: Category::Config,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            category: Category::Data,
            message: message.into(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        CliError {
            category: Category::Numeric,
            message: message.into(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::BadSynthSpec(_) => CliError::config(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::config(e.to_string()),
            ModelError::CheckpointFormat(_)
            | ModelError::CheckpointShape { .. }
            | ModelError::CheckpointIo { .. } => CliError::data(e.to_string()),
            ModelError::Bag { .. } | ModelError::Autograd(_) => CliError::numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::config(e.to_string()),
            TrainError::BadLabel(_)
            | TrainError::SingleClassValidation
            | TrainError::EmptySet { .. } => CliError::data(e.to_string()),
            TrainError::Model(inner) => inner.into(),
            TrainError::Data(inner) => inner.into(),
            TrainError::Eval(inner) => inner.into(),
            TrainError::Autograd(_)
            | TrainError::MissingGradient(_)
            | TrainError::StateShapeMismatch { .. }
            | TrainError::NonFinite { .. } => CliError::numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::SingleClass => CliError::data(e.to_string()),
            EvalError::BadArm { .. } => CliError::config(e.to_string()),
            EvalError::LengthMismatch { .. } => CliError::numeric(e.to_string()),
            EvalError::Train(inner) => (*inner).into(),
            EvalError::Data(inner) => inner.into(),
            EvalError::Model(inner) => inner.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

// ---- argument surface --------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "milnet",
    about = "Multi-instance bag classifier: train, evaluate, sweep, predict",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint plus a history table
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Run a paired sweep protocol (heads, pooling, or loss)
    Sweep(SweepArgs),
    /// Score one bag and print per-token attention weights
    Predict(PredictArgs),
    /// Finite-difference check of every parameter gradient on a tiny model
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic witness dataset
    Synth(SynthArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// TOML config file; flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides both [model].seed and [train].seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for fold execution (default: available cores)
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// Embedding width
    #[arg(long)]
    d_model: Option<usize>,
    /// Attention head count (0 bypasses the attention block)
    #[arg(long)]
    heads: Option<usize>,
    /// Fully connected sizes, comma separated (e.g. 256,128)
    #[arg(long, value_delimiter = ',')]
    fc_dims: Option<Vec<usize>>,
    /// Pooling views for self-adaptive pooling (subset of max,mean,sum,lse)
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<String>>,
    /// Instance-level pooling mode
    #[arg(long)]
    pooling: Option<String>,
    /// Architecture: ami_net_plus, mi_net, big_mi_net, att_net, gated_att_net
    #[arg(long)]
    model_kind: Option<String>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// focal or cross_entropy
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Training dataset (newline-delimited records)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Explicit validation dataset; defaults to a stratified holdout
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Fraction held out for validation when --val-data is absent
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Decision threshold for the confusion metrics
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Which protocol: heads, pooling, or loss
    #[arg(long)]
    kind: String,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sweep arms, comma separated (defaults mirror the protocol)
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
    /// Cross-validation folds
    #[arg(long)]
    folds: Option<usize>,
    /// Cross-validation repetitions
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bag tokens, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    tokens: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Relative-error tolerance
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Test hook: corrupt the named parameter's analytic gradient
    #[arg(long, hide = true)]
    inject_grad_error: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output file; defaults to <out>/synth.jsonl
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    num_bags: usize,
    /// Distinct tokens (witness plus background)
    #[arg(long, default_value_t = 100)]
    vocab_size: usize,
    #[arg(long, default_value_t = 5)]
    witness_tokens: usize,
    #[arg(long, default_value_t = 0.057)]
    positive_rate: f64,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 17)]
    max_len: usize,
    /// Positives require a distinct witness pair instead of witness presence
    #[arg(long, default_value_t = false)]
    correlated: bool,
}

// ---- config file -----------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    data: DataSection,
    #[serde(default)]
    run: RunSection,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fc_dims: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pooling_views: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    instance_pooling: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    early_stop_patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_fraction: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    arms: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    repetitions: Option<usize>,
}

fn read_config_file(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| CliError::config(format!("bad config {}: {e}", path.display())))
        }
    }
}

fn parse_views(names: &[String]) -> Result<Vec<PoolView>, CliError> {
    names
        .iter()
        .map(|s| s.trim().parse::<PoolView>().map_err(CliError::config))
        .collect()
}

/// Resolution order per key: built-in default, then config file, then flag.
fn resolve_model_config(
    file: &ConfigFile,
    flags: &ModelFlags,
    seed_override: Option<u64>,
) -> Result<ModelConfig, CliError> {
    let mut config = ModelConfig::new(2); // vocab_size rebound from data later
    let section = &file.model;
    if let Some(v) = section.d_model {
        config.d_model = v;
    }
    if let Some(v) = section.num_heads {
        config.num_heads = v;
    }
    if let Some(v) = &section.fc_dims {
        config.fc_dims = v.clone();
    }
    if let Some(v) = &section.pooling_views {
        config.pooling_views = parse_views(v)?;
    }
    if let Some(v) = &section.instance_pooling {
        config.instance_pooling = v.parse().map_err(CliError::config)?;
    }
    if let Some(v) = &section.model_kind {
        config.model_kind = v.parse().map_err(CliError::config)?;
    }
    if let Some(v) = section.seed {
        config.seed = v;
    }
    if let Some(v) = flags.d_model {
        config.d_model = v;
    }
    if let Some(v) = flags.heads {
        config.num_heads = v;
    }
    if let Some(v) = &flags.fc_dims {
        config.fc_dims = v.clone();
    }
    if let Some(v) = &flags.views {
        config.pooling_views = parse_views(v)?;
    }
    if let Some(v) = &flags.pooling {
        config.instance_pooling = v.parse().map_err(CliError::config)?;
    }
    if let Some(v) = &flags.model_kind {
        config.model_kind = v.parse().map_err(CliError::config)?;
    }
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    Ok(config)
}

fn resolve_train_config(
    file: &ConfigFile,
    flags: &TrainFlags,
    seed_override: Option<u64>,
) -> Result<TrainConfig, CliError> {
    let mut config = TrainConfig::default();
    let section = &file.train;
    if let Some(v) = section.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = section.beta1 {
        config.beta1 = v;
    }
    if let Some(v) = section.beta2 {
        config.beta2 = v;
    }
    if let Some(v) = section.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = section.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = section.max_epochs {
        config.max_epochs = v;
    }
    if let Some(v) = &section.loss {
        config.loss_kind = v.parse().map_err(CliError::config)?;
    }
    if let Some(v) = section.alpha {
        config.alpha = v;
    }
    if let Some(v) = section.gamma {
        config.gamma = v;
    }
    if let Some(v) = section.early_stop_patience {
        config.early_stop_patience = v;
    }
    if let Some(v) = section.seed {
        config.seed = v;
    }
    if let Some(v) = flags.lr {
        config.learning_rate = v;
    }
    if let Some(v) = flags.beta1 {
        config.beta1 = v;
    }
    if let Some(v) = flags.beta2 {
        config.beta2 = v;
    }
    if let Some(v) = flags.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = flags.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = flags.epochs {
        config.max_epochs = v;
    }
    if let Some(v) = &flags.loss {
        config.loss_kind = v.parse().map_err(CliError::config)?;
    }
    if let Some(v) = flags.alpha {
        config.alpha = v;
    }
    if let Some(v) = flags.gamma {
        config.gamma = v;
    }
    if let Some(v) = flags.patience {
        config.early_stop_patience = v;
    }
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(common: &CommonArgs, file: &ConfigFile) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| file.run.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn configure_jobs(common: &CommonArgs, file: &ConfigFile) {
    let jobs = common.jobs.or(file.run.jobs);
    if let Some(jobs) = jobs {
        // ignore the error if a pool already exists (tests in one process)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
}

fn echo_config(
    out: &Path,
    model: Option<&ModelConfig>,
    train: Option<&TrainConfig>,
    data: DataSection,
    run: RunSection,
) -> Result<(), CliError> {
    let echo = ConfigFile {
        model: match model {
            Some(m) => ModelSection {
                d_model: Some(m.d_model),
                num_heads: Some(m.num_heads),
                fc_dims: Some(m.fc_dims.clone()),
                pooling_views: Some(m.pooling_views.iter().map(|v| v.to_string()).collect()),
                instance_pooling: Some(m.instance_pooling.to_string()),
                model_kind: Some(m.model_kind.to_string()),
                seed: Some(m.seed),
            },
            None => ModelSection::default(),
        },
        train: match train {
            Some(t) => TrainSection {
                learning_rate: Some(t.learning_rate),
                beta1: Some(t.beta1),
                beta2: Some(t.beta2),
                epsilon: Some(t.epsilon),
                batch_size: Some(t.batch_size),
                max_epochs: Some(t.max_epochs),
                loss: Some(t.loss_kind.to_string()),
                alpha: Some(t.alpha),
                gamma: Some(t.gamma),
                early_stop_patience: Some(t.early_stop_patience),
                seed: Some(t.seed),
            },
            None => TrainSection::default(),
        },
        data,
        run,
    };
    let text = toml::to_string(&echo)
        .map_err(|e| CliError::config(format!("config echo failed: {e}")))?;
    write_atomic(&out.join("config.toml"), text.as_bytes())?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Vec<Bag>, CliError> {
    if !path.exists() {
        return Err(CliError::data(format!(
            "dataset not found: {}",
            path.display()
        )));
    }
    let bags = load_jsonl(path)?;
    if bags.is_empty() {
        return Err(CliError::data(format!(
            "dataset {} holds no records",
            path.display()
        )));
    }
    Ok(bags)
}

fn require_data(
    flag: &Option<PathBuf>,
    file: &ConfigFile,
) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| file.data.path.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::data("no dataset given: pass --data or set [data].path"))
}

// ---- commands -------------------------------------------------------------------

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category.name(), e.message);
            e.category.exit_code()
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = read_config_file(args.common.config.as_deref())?;
    configure_jobs(&args.common, &file);
    let mut model_config = resolve_model_config(&file, &args.model, args.common.seed)?;
    let train_config = resolve_train_config(&file, &args.train, args.common.seed)?;
    let out = out_dir(&args.common, &file);
    let data_path = require_data(&args.data, &file)?;
    let bags = load_dataset(&data_path)?;

    let val_path = args
        .val_data
        .clone()
        .or_else(|| file.data.val_path.as_ref().map(PathBuf::from));
    let val_fraction = args
        .val_fraction
        .or(file.data.val_fraction)
        .unwrap_or(DEFAULT_VAL_FRACTION);

    let (train_bags, val_bags, vocab) = match &val_path {
        Some(path) => {
            let val = load_dataset(path)?;
            let mut corpus = bags.clone();
            corpus.extend(val.iter().cloned());
            let vocab = Vocabulary::build(&corpus);
            (bags, val, vocab)
        }
        None => {
            let vocab = Vocabulary::build(&bags);
            let split_seed = derive_seed(train_config.seed, &[0x5EED]);
            let (train_idx, val_idx) = stratified_holdout(&bags, val_fraction, split_seed)
                .map_err(CliError::from)?;
            let train_bags: Vec<Bag> = train_idx.iter().map(|&i| bags[i].clone()).collect();
            let val_bags: Vec<Bag> = val_idx.iter().map(|&i| bags[i].clone()).collect();
            (train_bags, val_bags, vocab)
        }
    };
    model_config.vocab_size = vocab.table_rows();
    model_config.validate().map_err(CliError::from)?;

    let (params, history) = train(
        &train_bags,
        &val_bags,
        &vocab,
        &model_config,
        &train_config,
    )?;

    save_checkpoint(&params, &model_config, &vocab, &out.join("model.ckpt"))?;
    write_atomic(&out.join("history.csv"), history.to_csv().as_bytes())?;
    echo_config(
        &out,
        Some(&model_config),
        Some(&train_config),
        DataSection {
            path: Some(data_path.display().to_string()),
            val_path: val_path.map(|p| p.display().to_string()),
            val_fraction: Some(val_fraction),
        },
        RunSection {
            command: Some("train".into()),
            out: Some(out.display().to_string()),
            jobs: args.common.jobs.or(file.run.jobs),
            ..RunSection::default()
        },
    )?;
    println!(
        "trained {} epochs; best epoch {} (val AUC {:.6})",
        history.epochs.len(),
        history.best_epoch,
        history.best_val_auc()
    );
    println!("checkpoint: {}", out.join("model.ckpt").display());
    Ok(())
}

fn eval_report(
    scores: &[f64],
    labels: &[u8],
    model_config: &ModelConfig,
    threshold: f64,
) -> Result<MetricsReport, CliError> {
    let auc = roc_auc(scores, labels)?;
    let cm = confusion_metrics(scores, labels, threshold)?;
    Ok(MetricsReport {
        model: model_config.model_kind.to_string(),
        loss: "-".into(),
        heads: model_config.num_heads,
        pooling: model_config.instance_pooling.to_string(),
        repetition: 0,
        fold: 0,
        auc,
        accuracy: cm.accuracy,
        precision: cm.precision,
        recall: cm.recall,
        tp: cm.tp,
        fp: cm.fp,
        tn: cm.tn,
        fn_: cm.fn_,
        config_digest: model_config.digest(),
    })
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let file = read_config_file(args.common.config.as_deref())?;
    let out = out_dir(&args.common, &file);
    let threshold = args
        .threshold
        .or(file.run.threshold)
        .unwrap_or(CLASSIFICATION_THRESHOLD);
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let data_path = require_data(&args.data, &file)?;
    let bags = load_dataset(&data_path)?;
    let (scores, labels, _) = score_bags(
        &checkpoint.params,
        &checkpoint.config,
        &checkpoint.vocab,
        &bags,
        TrainConfig::default().batch_size,
    )?;
    let report = eval_report(&scores, &labels, &checkpoint.config, threshold)?;
    let csv = reports_to_csv(std::slice::from_ref(&report));
    print!("{csv}");
    write_atomic(&out.join("report.csv"), csv.as_bytes())?;
    echo_config(
        &out,
        Some(&checkpoint.config),
        None,
        DataSection {
            path: Some(data_path.display().to_string()),
            ..DataSection::default()
        },
        RunSection {
            command: Some("eval".into()),
            out: Some(out.display().to_string()),
            threshold: Some(threshold),
            ..RunSection::default()
        },
    )?;
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let file = read_config_file(args.common.config.as_deref())?;
    configure_jobs(&args.common, &file);
    let model_config = resolve_model_config(&file, &args.model, args.common.seed)?;
    let train_config = resolve_train_config(&file, &args.train, args.common.seed)?;
    let out = out_dir(&args.common, &file);
    let threshold = args
        .threshold
        .or(file.run.threshold)
        .unwrap_or(CLASSIFICATION_THRESHOLD);
    let folds = args.folds.or(file.run.folds).unwrap_or(10);
    let repetitions = args.repetitions.or(file.run.repetitions).unwrap_or(5);
    let data_path = require_data(&args.data, &file)?;
    let bags = load_dataset(&data_path)?;
    let seed = args.common.seed.unwrap_or(train_config.seed);
    let arms: Option<Vec<String>> = args.arms.clone().or_else(|| file.run.arms.clone());

    let table: SweepTable = match args.kind.as_str() {
        "heads" => {
            let counts: Vec<usize> = match &arms {
                None => vec![0, 4, 8, 16, 32],
                Some(list) => list
                    .iter()
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|e| CliError::config(format!("bad head count {s:?}: {e}")))
                    })
                    .collect::<Result<_, _>>()?,
            };
            sweep_heads(
                &bags,
                &model_config,
                &train_config,
                &counts,
                folds,
                repetitions,
                seed,
                threshold,
            )?
        }
        "pooling" => {
            let modes: Vec<InstancePooling> = match &arms {
                None => vec![
                    InstancePooling::SelfAdaptive,
                    InstancePooling::Max,
                    InstancePooling::Mean,
                    InstancePooling::Attention,
                ],
                Some(list) => list
                    .iter()
                    .map(|s| s.trim().parse().map_err(CliError::config))
                    .collect::<Result<_, _>>()?,
            };
            sweep_pooling(
                &bags,
                &model_config,
                &train_config,
                &modes,
                folds,
                repetitions,
                seed,
                threshold,
            )?
        }
        "loss" => {
            if arms.is_some() {
                return Err(CliError::config(
                    "the loss sweep always runs focal and cross_entropy; drop --arms",
                ));
            }
            compare_losses(
                &bags,
                &model_config,
                &train_config,
                folds,
                repetitions,
                seed,
                threshold,
            )?
        }
        other => {
            return Err(CliError::config(format!(
                "unknown sweep kind {other:?}: expected heads, pooling, or loss"
            )))
        }
    };

    let summary = table.summary_csv();
    print!("{summary}");
    write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    let reports = reports_to_csv(&table.all_reports());
    write_atomic(&out.join("report.csv"), reports.as_bytes())?;
    echo_config(
        &out,
        Some(&model_config),
        Some(&train_config),
        DataSection {
            path: Some(data_path.display().to_string()),
            ..DataSection::default()
        },
        RunSection {
            command: Some("sweep".into()),
            out: Some(out.display().to_string()),
            jobs: args.common.jobs.or(file.run.jobs),
            threshold: Some(threshold),
            kind: Some(args.kind.clone()),
            arms: Some(table.rows.iter().map(|r| r.arm.clone()).collect()),
            folds: Some(folds),
            repetitions: Some(repetitions),
        },
    )?;
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    for token in &args.tokens {
        if checkpoint.vocab.id_of(token).is_none() {
            return Err(CliError::data(format!(
                "token {token:?} is not in the checkpoint vocabulary"
            )));
        }
    }
    let bag = Bag {
        id: "query".into(),
        tokens: args.tokens.clone(),
        label: 0,
    };
    let (scores, _, attention) = score_bags(
        &checkpoint.params,
        &checkpoint.config,
        &checkpoint.vocab,
        std::slice::from_ref(&bag),
        1,
    )?;
    println!("probability: {:.6}", scores[0]);
    let weights = &attention[0];
    if weights.is_empty() {
        println!("(model kind {} exposes no instance weights)", checkpoint.config.model_kind);
        return Ok(());
    }
    let mut ranked: Vec<(&String, f64)> = bag.tokens.iter().zip(weights.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite weights"));
    for (token, weight) in ranked {
        println!("{token}\t{weight:.6}");
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let report = reference_gradcheck(
        args.step,
        args.tolerance,
        args.inject_grad_error.as_deref(),
    )?;
    println!("parameter\tmax_rel_error\tstatus");
    for entry in &report.entries {
        println!(
            "{}\t{:.3e}\t{}",
            entry.name,
            entry.max_rel_error,
            if entry.pass { "PASS" } else { "FAIL" }
        );
    }
    if report.all_pass() {
        println!(
            "gradcheck: PASS ({} parameters, tolerance {:.1e}, step {:.1e})",
            report.entries.len(),
            report.tolerance,
            report.step
        );
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .entries
            .iter()
            .filter(|e| !e.pass)
            .map(|e| e.name.as_str())
            .collect();
        Err(CliError::numeric(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let file = read_config_file(args.common.config.as_deref())?;
    let out = out_dir(&args.common, &file);
    let spec = SynthSpec {
        num_bags: args.num_bags,
        vocab_size: args.vocab_size,
        num_witness_tokens: args.witness_tokens,
        positive_rate: args.positive_rate,
        bag_length_range: (args.min_len, args.max_len),
        correlated: args.correlated,
        seed: args.common.seed.unwrap_or(0),
    };
    let bags = synth_generate(&spec)?;
    let target = args.file.clone().unwrap_or_else(|| out.join("synth.jsonl"));
    write_atomic(&target, to_jsonl(&bags).as_bytes())?;
    let positives = bags.iter().filter(|b| b.label == 1).count();
    println!("bags: {}", bags.len());
    println!("positives: {positives}");
    println!("negatives: {}", bags.len() - positives);
    println!("file: {}", target.display());
    Ok(())
}

// ---- helpers shared with tests ---------------------------------------------------

/// Parses sweep arm strings for the heads protocol; exposed for unit tests.
#[doc(hidden)]
pub fn parse_head_arms(arms: &[String]) -> Result<Vec<usize>, String> {
    arms.iter()
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}
