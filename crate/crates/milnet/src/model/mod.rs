//! Model assembly: configuration, parameter initialization, the forward pass
//! of the attention-based bag classifier, the deep MIL baselines, and the
//! checkpoint format.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use forward::{
    attention_pool, bag_score, baseline_forward, embed_bag, forward, gated_attention_pool,
    instance_ffn, multi_head_block, scaled_dot_attention, self_adaptive_pool, ForwardOutput,
    LAYER_NORM_EPS, PROB_EPSILON,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, ReduceOp, Tape, Tensor, TensorId};

/// Name of the embedding table in a [`ParameterSet`]; row 0 is the pad row,
/// which is zero-initialized and excluded from optimizer updates.
pub const EMBEDDING_PARAM: &str = "embed.table";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("bag {bag_id}: {source}")]
    Bag {
        bag_id: String,
        source: AutogradError,
    },
    #[error("checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint io for {path}: {source}")]
    CheckpointIo {
        path: String,
        source: std::io::Error,
    },
}

/// Which architecture the parameters describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Embedding, masked multi-head self-attention, FFN, self-adaptive plus
    /// gated-attention pooling, joint sigmoid scorer.
    AmiNetPlus,
    /// Per-instance sigmoid scores max-pooled into the bag probability.
    MiNet,
    /// Max-pooled instance representations, then a linear sigmoid scorer.
    BigMiNet,
    /// Attention pooling with a tanh gate only.
    AttNet,
    /// Attention pooling with the tanh * sigmoid gate.
    GatedAttNet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::AmiNetPlus,
        ModelKind::MiNet,
        ModelKind::BigMiNet,
        ModelKind::AttNet,
        ModelKind::GatedAttNet,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::AmiNetPlus => "ami_net_plus",
            ModelKind::MiNet => "mi_net",
            ModelKind::BigMiNet => "big_mi_net",
            ModelKind::AttNet => "att_net",
            ModelKind::GatedAttNet => "gated_att_net",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown model kind {s:?}"))
    }
}

/// Untrainable pooling views combinable by the self-adaptive pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolView {
    Max,
    Mean,
    Sum,
    Lse,
}

impl PoolView {
    pub const ALL: [PoolView; 4] = [PoolView::Max, PoolView::Mean, PoolView::Sum, PoolView::Lse];

    pub fn as_str(&self) -> &'static str {
        match self {
            PoolView::Max => "max",
            PoolView::Mean => "mean",
            PoolView::Sum => "sum",
            PoolView::Lse => "lse",
        }
    }

    pub(crate) fn reduce_op(&self) -> ReduceOp {
        match self {
            PoolView::Max => ReduceOp::Max,
            PoolView::Mean => ReduceOp::Mean,
            PoolView::Sum => ReduceOp::Sum,
            PoolView::Lse => ReduceOp::Lse,
        }
    }
}

impl fmt::Display for PoolView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolView {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PoolView::ALL
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown pooling view {s:?}"))
    }
}

/// Instance-level pooling strategy producing the bag representation branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstancePooling {
    SelfAdaptive,
    Max,
    Mean,
    Sum,
    Lse,
    Attention,
}

impl InstancePooling {
    pub const ALL: [InstancePooling; 6] = [
        InstancePooling::SelfAdaptive,
        InstancePooling::Max,
        InstancePooling::Mean,
        InstancePooling::Sum,
        InstancePooling::Lse,
        InstancePooling::Attention,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InstancePooling::SelfAdaptive => "self_adaptive",
            InstancePooling::Max => "max",
            InstancePooling::Mean => "mean",
            InstancePooling::Sum => "sum",
            InstancePooling::Lse => "lse",
            InstancePooling::Attention => "attention",
        }
    }
}

impl fmt::Display for InstancePooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InstancePooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InstancePooling::ALL
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown instance pooling mode {s:?}"))
    }
}

/// Architecture hyperparameters. `vocab_size` counts embedding-table rows,
/// i.e. distinct tokens plus the pad row at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// 0 bypasses the attention block entirely.
    pub num_heads: usize,
    pub fc_dims: Vec<usize>,
    pub pooling_views: Vec<PoolView>,
    pub instance_pooling: InstancePooling,
    pub model_kind: ModelKind,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults mirroring the reference setup: 512-dim embeddings, 4 heads,
    /// fully connected sizes 256 and 128, all four pooling views.
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 512,
            num_heads: 4,
            fc_dims: vec![256, 128],
            pooling_views: PoolView::ALL.to_vec(),
            instance_pooling: InstancePooling::SelfAdaptive,
            model_kind: ModelKind::AmiNetPlus,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return fail(format!(
                "vocab_size must be at least 2 (pad row plus one token), got {}",
                self.vocab_size
            ));
        }
        if self.d_model == 0 {
            return fail("d_model must be positive".into());
        }
        if self.num_heads > 0 && self.d_model % self.num_heads != 0 {
            return fail(format!(
                "num_heads {} must divide d_model {}",
                self.num_heads, self.d_model
            ));
        }
        if self.fc_dims.is_empty() || self.fc_dims.contains(&0) {
            return fail(format!(
                "fc_dims must be a nonempty list of positive sizes, got {:?}",
                self.fc_dims
            ));
        }
        if self.instance_pooling == InstancePooling::SelfAdaptive && self.pooling_views.is_empty()
        {
            return fail("pooling_views must be nonempty for self_adaptive pooling".into());
        }
        for (i, v) in self.pooling_views.iter().enumerate() {
            if self.pooling_views[..i].contains(v) {
                return fail(format!("pooling view {v} listed twice"));
            }
        }
        Ok(())
    }

    /// Width of an instance representation (the last FFN stage).
    pub fn representation_dim(&self) -> usize {
        *self.fc_dims.last().expect("fc_dims validated nonempty")
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Stable content digest for report provenance.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        crate::util::digest_hex(json.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    XavierUniform,
    Zeros,
    Ones,
    EmbeddingNormal,
}

fn parameter_spec(config: &ModelConfig) -> BTreeMap<String, (Vec<usize>, InitKind)> {
    let mut spec = BTreeMap::new();
    let mut put = |name: String, shape: Vec<usize>, kind: InitKind| {
        spec.insert(name, (shape, kind));
    };
    let d = config.d_model;
    let m = config.representation_dim();
    put(
        EMBEDDING_PARAM.to_string(),
        vec![config.vocab_size, d],
        InitKind::EmbeddingNormal,
    );
    if config.model_kind == ModelKind::AmiNetPlus && config.num_heads > 0 {
        let dk = config.head_dim();
        for h in 0..config.num_heads {
            for proj in ["wq", "wk", "wv"] {
                put(
                    format!("attn.h{h:02}.{proj}"),
                    vec![d, dk],
                    InitKind::XavierUniform,
                );
            }
        }
        put("attn.proj".to_string(), vec![d, d], InitKind::XavierUniform);
        put("attn.ln_gain".to_string(), vec![d], InitKind::Ones);
        put("attn.ln_bias".to_string(), vec![d], InitKind::Zeros);
    }
    let mut fan_in = d;
    for (i, &out) in config.fc_dims.iter().enumerate() {
        put(
            format!("ffn.{i}.weight"),
            vec![fan_in, out],
            InitKind::XavierUniform,
        );
        put(format!("ffn.{i}.bias"), vec![out], InitKind::Zeros);
        fan_in = out;
    }
    let gate_pool = |put: &mut dyn FnMut(String, Vec<usize>, InitKind)| {
        put("gatepool.w_tanh".to_string(), vec![m, m], InitKind::XavierUniform);
        put("gatepool.w_sigm".to_string(), vec![m, m], InitKind::XavierUniform);
        put("gatepool.w_score".to_string(), vec![m, 1], InitKind::XavierUniform);
    };
    let att_pool = |put: &mut dyn FnMut(String, Vec<usize>, InitKind)| {
        put("attpool.w_tanh".to_string(), vec![m, m], InitKind::XavierUniform);
        put("attpool.w_score".to_string(), vec![m, 1], InitKind::XavierUniform);
    };
    let scorer_in = match config.model_kind {
        ModelKind::AmiNetPlus => 2 * m,
        _ => m,
    };
    match config.model_kind {
        ModelKind::AmiNetPlus => {
            match config.instance_pooling {
                InstancePooling::SelfAdaptive => put(
                    "sap.view_weights".to_string(),
                    vec![config.pooling_views.len(), 1],
                    InitKind::XavierUniform,
                ),
                InstancePooling::Attention => att_pool(&mut put),
                _ => {}
            }
            gate_pool(&mut put);
        }
        ModelKind::MiNet | ModelKind::BigMiNet => {}
        ModelKind::AttNet => att_pool(&mut put),
        ModelKind::GatedAttNet => gate_pool(&mut put),
    }
    put(
        "scorer.weight".to_string(),
        vec![scorer_in, 1],
        InitKind::XavierUniform,
    );
    put("scorer.bias".to_string(), vec![1], InitKind::Zeros);
    spec
}

/// Named, shaped collection of trainable tensors defining one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    /// Initializes parameters for `config` deterministically from `rng_seed`:
    /// weight matrices are uniform within the fan-based bound
    /// +-sqrt(6 / (fan_in + fan_out)), biases start at zero, layer-norm gains
    /// at one, and embedding rows are normal with standard deviation
    /// 1/sqrt(d_model) except the pad row, which is forced to zero.
    pub fn init(config: &ModelConfig, rng_seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut tensors = BTreeMap::new();
        for (name, (shape, kind)) in parameter_spec(config) {
            let numel: usize = shape.iter().product();
            let data = match kind {
                InitKind::Zeros => vec![0.0; numel],
                InitKind::Ones => vec![1.0; numel],
                InitKind::XavierUniform => {
                    let (fan_in, fan_out) = match shape.as_slice() {
                        [r, c] => (*r, *c),
                        [n] => (*n, 1),
                        other => (other[0], other[other.len() - 1]),
                    };
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
                }
                InitKind::EmbeddingNormal => {
                    let d = shape[1];
                    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt())
                        .expect("positive standard deviation");
                    let mut data: Vec<f64> =
                        (0..numel).map(|_| normal.sample(&mut rng)).collect();
                    data[..d].fill(0.0); // pad row
                    data
                }
            };
            let tensor = Tensor::new(data, &shape)
                .expect("parameter shapes are valid")
                .with_requires_grad(true);
            tensors.insert(name, tensor);
        }
        Ok(ParameterSet { tensors })
    }

    /// Assembles a set from named tensors directly (checkpoint loading and
    /// optimizer tests build bespoke sets this way).
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        ParameterSet { tensors }
    }

    /// Shapes implied by a config, independent of any initialization.
    pub fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        parameter_spec(config)
            .into_iter()
            .map(|(name, (shape, _))| (name, shape))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    /// Registers every tensor on a fresh tape for one forward/backward pass.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self
            .tensors
            .iter()
            .map(|(name, tensor)| (name.clone(), tape.leaf(tensor)))
            .collect();
        BoundParams { ids }
    }
}

/// Tape handles for one bound [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn ids(&self) -> &BTreeMap<String, TensorId> {
        &self.ids
    }

    pub(crate) fn from_ids(ids: BTreeMap<String, TensorId>) -> Self {
        BoundParams { ids }
    }
}
