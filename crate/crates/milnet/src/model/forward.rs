use crate::autograd::{AutogradError, ReduceOp, Tape, TensorId};
use crate::bagdata::BatchedBags;

use super::{
    BoundParams, InstancePooling, ModelConfig, ModelError, ModelKind, PoolView, EMBEDDING_PARAM,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Probabilities are clamped into [PROB_EPSILON, 1 - PROB_EPSILON] so the
/// losses can take logarithms of either side.
pub const PROB_EPSILON: f64 = 1e-7;

/// Per-batch forward results. `probs` are single-element tape nodes usable as
/// loss inputs; `attention` holds each bag's instance weights at its valid
/// positions, in load order (empty for model kinds without such weights).
#[derive(Debug)]
pub struct ForwardOutput {
    pub probs: Vec<TensorId>,
    pub prob_values: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

/// Embedding lookup for one bag row: gathers a table row per token id.
/// Pad slots carry id 0, whose row stays zero throughout training.
pub fn embed_bag(
    tape: &mut Tape,
    table: TensorId,
    token_ids: &[u32],
) -> Result<TensorId, AutogradError> {
    let indices: Vec<usize> = token_ids.iter().map(|&id| id as usize).collect();
    tape.gather_rows(table, &indices)
}

/// Scaled dot-product self-attention over a single matrix, queries = keys =
/// values = `x`. Masked columns receive zero weight and masked output rows
/// are zeroed.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    x: TensorId,
    mask: &[bool],
) -> Result<TensorId, AutogradError> {
    attention(tape, x, x, x, mask)
}

/// General form: weights = masked row softmax of q . k^T / sqrt(d_k), output
/// rows = weights . v, with masked rows zeroed afterwards.
fn attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    mask: &[bool],
) -> Result<TensorId, AutogradError> {
    let dk = tape.shape_of(q)[1] as f64;
    let kt = tape.transpose(k)?;
    let sim = tape.matmul(q, kt)?;
    let sim = tape.scale(sim, 1.0 / dk.sqrt())?;
    let weights = tape.masked_softmax(sim, 1, Some(mask))?;
    let out = tape.matmul(weights, v)?;
    tape.mask_rows(out, mask)
}

/// Multi-head self-attention with residual connection and row-wise layer
/// normalization. With zero heads the block is the identity map.
pub fn multi_head_block(
    tape: &mut Tape,
    x: TensorId,
    mask: &[bool],
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<TensorId, AutogradError> {
    if config.num_heads == 0 {
        return Ok(x);
    }
    let mut heads = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let q = tape.matmul(x, bound.id(&format!("attn.h{h:02}.wq")))?;
        let k = tape.matmul(x, bound.id(&format!("attn.h{h:02}.wk")))?;
        let v = tape.matmul(x, bound.id(&format!("attn.h{h:02}.wv")))?;
        heads.push(attention(tape, q, k, v, mask)?);
    }
    let concat = tape.concat(&heads, 1)?;
    let projected = tape.matmul(concat, bound.id("attn.proj"))?;
    let residual = tape.add(x, projected)?;
    let normed = tape.layer_norm(
        residual,
        bound.id("attn.ln_gain"),
        bound.id("attn.ln_bias"),
        LAYER_NORM_EPS,
    )?;
    tape.mask_rows(normed, mask)
}

/// Per-instance fully connected stages (affine then relu). Masked rows are
/// re-zeroed after every stage so biases cannot leak into pad positions.
pub fn instance_ffn(
    tape: &mut Tape,
    x: TensorId,
    mask: &[bool],
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<TensorId, AutogradError> {
    let rows = tape.shape_of(x)[0];
    let mut h = x;
    for i in 0..config.fc_dims.len() {
        let w = bound.id(&format!("ffn.{i}.weight"));
        let b = bound.id(&format!("ffn.{i}.bias"));
        h = tape.matmul(h, w)?;
        let bias_rows = tape.broadcast_rows(b, rows)?;
        h = tape.add(h, bias_rows)?;
        h = tape.relu(h)?;
        h = tape.mask_rows(h, mask)?;
    }
    Ok(h)
}

/// Combines untrainable pooling views of the valid instances into one bag
/// representation: z = sum_v view_weights[v] * view_v. Returns shape [1, M].
pub fn self_adaptive_pool(
    tape: &mut Tape,
    h: TensorId,
    mask: &[bool],
    view_weights: TensorId,
    views: &[PoolView],
) -> Result<TensorId, AutogradError> {
    let m = tape.shape_of(h)[1];
    let mut stacked = Vec::with_capacity(views.len());
    for view in views {
        let pooled = tape.reduce(view.reduce_op(), h, 0, Some(mask))?;
        stacked.push(tape.reshape(pooled, &[1, m])?);
    }
    let view_matrix = tape.concat(&stacked, 0)?;
    let weights_t = tape.transpose(view_weights)?;
    tape.matmul(weights_t, view_matrix)
}

/// Attention over instances whose per-instance score passes a tanh * sigmoid
/// gate: score_j = w_score^T (tanh(h_j W_tanh) * sigmoid(h_j W_sigm)).
/// Returns the pooled representation [1, M] and the weights [L, 1]; masked
/// instances receive weight exactly 0.
pub fn gated_attention_pool(
    tape: &mut Tape,
    h: TensorId,
    mask: &[bool],
    w_tanh: TensorId,
    w_sigm: TensorId,
    w_score: TensorId,
) -> Result<(TensorId, TensorId), AutogradError> {
    let t = tape.matmul(h, w_tanh)?;
    let t = tape.tanh(t)?;
    let g = tape.matmul(h, w_sigm)?;
    let g = tape.sigmoid(g)?;
    let gated = tape.mul(t, g)?;
    let scores = tape.matmul(gated, w_score)?;
    let weights = tape.masked_softmax(scores, 0, Some(mask))?;
    let weights_t = tape.transpose(weights)?;
    let pooled = tape.matmul(weights_t, h)?;
    Ok((pooled, weights))
}

/// Attention pooling with a tanh gate only (the non-gated baseline form).
pub fn attention_pool(
    tape: &mut Tape,
    h: TensorId,
    mask: &[bool],
    w_tanh: TensorId,
    w_score: TensorId,
) -> Result<(TensorId, TensorId), AutogradError> {
    let t = tape.matmul(h, w_tanh)?;
    let t = tape.tanh(t)?;
    let scores = tape.matmul(t, w_score)?;
    let weights = tape.masked_softmax(scores, 0, Some(mask))?;
    let weights_t = tape.transpose(weights)?;
    let pooled = tape.matmul(weights_t, h)?;
    Ok((pooled, weights))
}

/// Linear scorer plus sigmoid over a [1, F] feature row, clamped away from
/// 0 and 1 for downstream logarithms.
pub fn bag_score(
    tape: &mut Tape,
    features: TensorId,
    weight: TensorId,
    bias: TensorId,
) -> Result<TensorId, AutogradError> {
    let logit = tape.matmul(features, weight)?;
    let bias = tape.reshape(bias, &[1, 1])?;
    let logit = tape.add(logit, bias)?;
    let prob = tape.sigmoid(logit)?;
    tape.clamp(prob, PROB_EPSILON, 1.0 - PROB_EPSILON)
}

/// Runs the configured model over a padded batch, one bag at a time.
pub fn forward(
    tape: &mut Tape,
    batch: &BatchedBags,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<ForwardOutput, ModelError> {
    let mut probs = Vec::with_capacity(batch.batch);
    let mut prob_values = Vec::with_capacity(batch.batch);
    let mut attention_weights = Vec::with_capacity(batch.batch);
    for b in 0..batch.batch {
        let bag_id = &batch.bag_ids[b];
        let mask = batch.row_mask(b);
        let annotate = |source: AutogradError| ModelError::Bag {
            bag_id: bag_id.clone(),
            source,
        };
        let (prob, weights) =
            forward_bag(tape, batch.row_ids(b), mask, bound, config).map_err(annotate)?;
        probs.push(prob);
        prob_values.push(tape.item(prob));
        let valid_weights = match weights {
            Some(w) => tape
                .value(w)
                .iter()
                .zip(mask.iter())
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v)
                .collect(),
            None => Vec::new(),
        };
        attention_weights.push(valid_weights);
    }
    Ok(ForwardOutput {
        probs,
        prob_values,
        attention: attention_weights,
    })
}

fn forward_bag(
    tape: &mut Tape,
    token_ids: &[u32],
    mask: &[bool],
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<(TensorId, Option<TensorId>), AutogradError> {
    let table = bound.id(EMBEDDING_PARAM);
    let x = embed_bag(tape, table, token_ids)?;
    let scorer_w = bound.id("scorer.weight");
    let scorer_b = bound.id("scorer.bias");
    match config.model_kind {
        ModelKind::AmiNetPlus => {
            let x = multi_head_block(tape, x, mask, bound, config)?;
            let h = instance_ffn(tape, x, mask, bound, config)?;
            let m = config.representation_dim();
            let z_instance = match config.instance_pooling {
                InstancePooling::SelfAdaptive => self_adaptive_pool(
                    tape,
                    h,
                    mask,
                    bound.id("sap.view_weights"),
                    &config.pooling_views,
                )?,
                InstancePooling::Attention => {
                    let (z, _) = attention_pool(
                        tape,
                        h,
                        mask,
                        bound.id("attpool.w_tanh"),
                        bound.id("attpool.w_score"),
                    )?;
                    z
                }
                InstancePooling::Max | InstancePooling::Mean | InstancePooling::Sum
                | InstancePooling::Lse => {
                    let op = match config.instance_pooling {
                        InstancePooling::Max => ReduceOp::Max,
                        InstancePooling::Mean => ReduceOp::Mean,
                        InstancePooling::Sum => ReduceOp::Sum,
                        _ => ReduceOp::Lse,
                    };
                    let pooled = tape.reduce(op, h, 0, Some(mask))?;
                    tape.reshape(pooled, &[1, m])?
                }
            };
            let (z_att, weights) = gated_attention_pool(
                tape,
                h,
                mask,
                bound.id("gatepool.w_tanh"),
                bound.id("gatepool.w_sigm"),
                bound.id("gatepool.w_score"),
            )?;
            let features = tape.concat(&[z_att, z_instance], 1)?;
            let prob = bag_score(tape, features, scorer_w, scorer_b)?;
            Ok((prob, Some(weights)))
        }
        ModelKind::MiNet => {
            let h = instance_ffn(tape, x, mask, bound, config)?;
            let rows = tape.shape_of(h)[0];
            let logits = tape.matmul(h, scorer_w)?;
            let bias_rows = tape.broadcast_rows(scorer_b, rows)?;
            let logits = tape.add(logits, bias_rows)?;
            let instance_probs = tape.sigmoid(logits)?;
            let best = tape.reduce(ReduceOp::Max, instance_probs, 0, Some(mask))?;
            let prob = tape.clamp(best, PROB_EPSILON, 1.0 - PROB_EPSILON)?;
            Ok((prob, None))
        }
        ModelKind::BigMiNet => {
            let h = instance_ffn(tape, x, mask, bound, config)?;
            let m = config.representation_dim();
            let pooled = tape.reduce(ReduceOp::Max, h, 0, Some(mask))?;
            let z = tape.reshape(pooled, &[1, m])?;
            let prob = bag_score(tape, z, scorer_w, scorer_b)?;
            Ok((prob, None))
        }
        ModelKind::AttNet => {
            let h = instance_ffn(tape, x, mask, bound, config)?;
            let (z, weights) = attention_pool(
                tape,
                h,
                mask,
                bound.id("attpool.w_tanh"),
                bound.id("attpool.w_score"),
            )?;
            let prob = bag_score(tape, z, scorer_w, scorer_b)?;
            Ok((prob, Some(weights)))
        }
        ModelKind::GatedAttNet => {
            let h = instance_ffn(tape, x, mask, bound, config)?;
            let (z, weights) = gated_attention_pool(
                tape,
                h,
                mask,
                bound.id("gatepool.w_tanh"),
                bound.id("gatepool.w_sigm"),
                bound.id("gatepool.w_score"),
            )?;
            let prob = bag_score(tape, z, scorer_w, scorer_b)?;
            Ok((prob, Some(weights)))
        }
    }
}

/// Baseline dispatch; `kind` overrides the configured model kind.
pub fn baseline_forward(
    tape: &mut Tape,
    kind: ModelKind,
    batch: &BatchedBags,
    bound: &BoundParams,
    config: &ModelConfig,
) -> Result<ForwardOutput, ModelError> {
    let mut config = config.clone();
    config.model_kind = kind;
    forward(tape, batch, bound, &config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::bagdata::{batchify, Bag, Vocabulary};
    use crate::model::ParameterSet;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape, data: Vec<f64>, shape: &[usize]) -> TensorId {
        let t = Tensor::new(data, shape).unwrap().with_requires_grad(true);
        tape.leaf(&t)
    }

    fn tiny_config(vocab_rows: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab_rows,
            d_model: 8,
            num_heads: 2,
            fc_dims: vec![6, 4],
            pooling_views: PoolView::ALL.to_vec(),
            instance_pooling: InstancePooling::SelfAdaptive,
            model_kind: ModelKind::AmiNetPlus,
            seed: 0,
        }
    }

    fn sample_bags() -> Vec<Bag> {
        let names = ["a", "b", "c", "d", "e", "f", "g"];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut bags = Vec::new();
        for i in 0..6 {
            let len = rng.random_range(1..=5);
            let tokens = (0..len)
                .map(|_| names[rng.random_range(0..names.len())].to_string())
                .collect();
            bags.push(Bag {
                id: format!("bag{i}"),
                tokens,
                label: (i % 2) as u8,
            });
        }
        bags
    }

    #[test]
    fn scaled_dot_attention_spot_cases() {
        // single valid instance: output row equals that row
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![0.3, -0.7, 1.1, 9.0, 9.0, 9.0], &[2, 3]);
        let out = scaled_dot_attention(&mut tape, x, &[true, false]).unwrap();
        let v = tape.value(out);
        assert_eq!(&v[..3], &[0.3, -0.7, 1.1]);
        assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);

        // two identical valid rows: each output row equals the shared row
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![0.5, -0.25, 0.5, -0.25], &[2, 2]);
        let out = scaled_dot_attention(&mut tape, x, &[true, true]).unwrap();
        for row in 0..2 {
            let v = &tape.value(out)[row * 2..(row + 1) * 2];
            assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] + 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_dot_attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = [true, true, true];
        let (l, d) = (3usize, 4usize);

        // naive two-loop attention
        let mut expected = vec![0.0; l * d];
        for i in 0..l {
            let mut weights = vec![0.0; l];
            for j in 0..l {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += data[i * d + t] * data[j * d + t];
                }
                weights[j] = dot / (d as f64).sqrt();
            }
            let mx = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = weights.iter().map(|w| (w - mx).exp()).sum();
            for j in 0..l {
                let a = (weights[j] - mx).exp() / denom;
                for t in 0..d {
                    expected[i * d + t] += a * data[j * d + t];
                }
            }
        }

        let mut tape = Tape::new();
        let x = leaf(&mut tape, data, &[l, d]);
        let out = scaled_dot_attention(&mut tape, x, &mask).unwrap();
        for (got, want) in tape.value(out).iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_zero_heads_is_identity() {
        let bags = sample_bags();
        let vocab = Vocabulary::build(&bags);
        let mut config = tiny_config(vocab.table_rows());
        config.num_heads = 0;
        let params = ParameterSet::init(&config, 5).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let batch = &batchify(&bags, &vocab, 8).unwrap()[0];
        let x = embed_bag(&mut tape, bound.id(EMBEDDING_PARAM), batch.row_ids(0)).unwrap();
        let out = multi_head_block(&mut tape, x, batch.row_mask(0), &bound, &config).unwrap();
        assert_eq!(x, out);
    }

    #[test]
    fn multi_head_single_identity_head_matches_composition() {
        // one head, d_k = d_model, all projections identity:
        // block == mask_rows(layer_norm(x + scaled_dot_attention(x)))
        let d = 4;
        let mut config = tiny_config(6);
        config.d_model = d;
        config.num_heads = 1;
        let mut params = ParameterSet::init(&config, 2).unwrap();
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        for name in ["attn.h00.wq", "attn.h00.wk", "attn.h00.wv", "attn.proj"] {
            params
                .get_mut(name)
                .unwrap()
                .data_mut()
                .copy_from_slice(&eye);
        }
        let mask = [true, true, false];
        let data = vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.7, 0.2, 0.4, 0.0, 0.0, 0.0, 0.0];

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = leaf(&mut tape, data.clone(), &[3, d]);
        let block = multi_head_block(&mut tape, x, &mask, &bound, &config).unwrap();

        let x2 = leaf(&mut tape, data, &[3, d]);
        let att = scaled_dot_attention(&mut tape, x2, &mask).unwrap();
        let res = tape.add(x2, att).unwrap();
        let normed = tape
            .layer_norm(
                res,
                bound.id("attn.ln_gain"),
                bound.id("attn.ln_bias"),
                LAYER_NORM_EPS,
            )
            .unwrap();
        let expected = tape.mask_rows(normed, &mask).unwrap();

        for (a, b) in tape.value(block).iter().zip(tape.value(expected).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_adaptive_pool_hand_case() {
        // rows [1,3] and [3,1]: views max [3,3], mean [2,2], sum [4,4],
        // lse [ln(e+e^3); ...]; weights pick out the max view
        let mut tape = Tape::new();
        let h = leaf(&mut tape, vec![1.0, 3.0, 3.0, 1.0], &[2, 2]);
        let w = leaf(&mut tape, vec![1.0, 0.0, 0.0, 0.0], &[4, 1]);
        let z = self_adaptive_pool(&mut tape, h, &[true, true], w, &PoolView::ALL).unwrap();
        assert_eq!(tape.value(z), &[3.0, 3.0]);

        let lse = (1f64.exp() + 3f64.exp()).ln();
        assert!((lse - 3.1269).abs() < 1e-4);
        let mut tape = Tape::new();
        let h = leaf(&mut tape, vec![1.0, 3.0, 3.0, 1.0], &[2, 2]);
        let w = leaf(&mut tape, vec![0.0, 0.0, 0.0, 1.0], &[4, 1]);
        let z = self_adaptive_pool(&mut tape, h, &[true, true], w, &PoolView::ALL).unwrap();
        for v in tape.value(z) {
            assert!((v - lse).abs() < 1e-12);
        }
    }

    #[test]
    fn self_adaptive_pool_single_instance_collapse() {
        let mut tape = Tape::new();
        let h = leaf(&mut tape, vec![0.4, -1.2, 2.0], &[1, 3]);
        let w = leaf(&mut tape, vec![0.25, -0.5, 1.5, 0.75], &[4, 1]);
        let z = self_adaptive_pool(&mut tape, h, &[true], w, &PoolView::ALL).unwrap();
        let coeff = 0.25 - 0.5 + 1.5 + 0.75;
        for (got, want) in tape.value(z).iter().zip([0.4, -1.2, 2.0]) {
            assert!((got - coeff * want).abs() < 1e-12);
        }
    }

    #[test]
    fn self_adaptive_pool_ignores_pad_rows() {
        let mut tape = Tape::new();
        let w_data = vec![0.3, 0.4, -0.2, 0.9];
        let h = leaf(&mut tape, vec![1.0, 3.0, 3.0, 1.0], &[2, 2]);
        let w = leaf(&mut tape, w_data.clone(), &[4, 1]);
        let z = self_adaptive_pool(&mut tape, h, &[true, true], w, &PoolView::ALL).unwrap();
        let plain: Vec<f64> = tape.value(z).to_vec();

        let h2 = leaf(&mut tape, vec![1.0, 3.0, 3.0, 1.0, 0.0, 0.0], &[3, 2]);
        let w2 = leaf(&mut tape, w_data, &[4, 1]);
        let z2 =
            self_adaptive_pool(&mut tape, h2, &[true, true, false], w2, &PoolView::ALL).unwrap();
        assert_eq!(plain, tape.value(z2));
    }

    #[test]
    fn gated_attention_pool_spot_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = 3;
        let w_tanh: Vec<f64> = (0..m * m).map(|_| rng.random_range(-0.8..0.8)).collect();
        let w_sigm: Vec<f64> = (0..m * m).map(|_| rng.random_range(-0.8..0.8)).collect();
        let w_score: Vec<f64> = (0..m).map(|_| rng.random_range(-0.8..0.8)).collect();

        // single valid instance: weight 1, pooled = that instance
        let mut tape = Tape::new();
        let h = leaf(&mut tape, vec![0.2, -0.3, 0.9], &[1, m]);
        let wt = leaf(&mut tape, w_tanh.clone(), &[m, m]);
        let ws = leaf(&mut tape, w_sigm.clone(), &[m, m]);
        let wsc = leaf(&mut tape, w_score.clone(), &[m, 1]);
        let (z, s) = gated_attention_pool(&mut tape, h, &[true], wt, ws, wsc).unwrap();
        assert_eq!(tape.value(s), &[1.0]);
        assert_eq!(tape.value(z), &[0.2, -0.3, 0.9]);

        // two identical instances: weights [0.5, 0.5], pooled = shared row
        let mut tape = Tape::new();
        let h = leaf(&mut tape, vec![0.4, 0.1, -0.6, 0.4, 0.1, -0.6], &[2, m]);
        let wt = leaf(&mut tape, w_tanh, &[m, m]);
        let ws = leaf(&mut tape, w_sigm, &[m, m]);
        let wsc = leaf(&mut tape, w_score, &[m, 1]);
        let (z, s) = gated_attention_pool(&mut tape, h, &[true, true], wt, ws, wsc).unwrap();
        for v in tape.value(s) {
            assert!((v - 0.5).abs() < 1e-12);
        }
        for (got, want) in tape.value(z).iter().zip([0.4, 0.1, -0.6]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_attention_pool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (l, m) = (3usize, 4usize);
        let h: Vec<f64> = (0..l * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_tanh: Vec<f64> = (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_sigm: Vec<f64> = (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_score: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();

        // hand-rolled gate / softmax / weighted sum
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut gates = vec![0.0; l];
        for j in 0..l {
            let mut gate = 0.0;
            for c in 0..m {
                let mut th = 0.0;
                let mut sg = 0.0;
                for t in 0..m {
                    th += h[j * m + t] * w_tanh[t * m + c];
                    sg += h[j * m + t] * w_sigm[t * m + c];
                }
                gate += w_score[c] * th.tanh() * sigmoid(sg);
            }
            gates[j] = gate;
        }
        let mx = gates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = gates.iter().map(|g| (g - mx).exp()).sum();
        let weights: Vec<f64> = gates.iter().map(|g| (g - mx).exp() / denom).collect();
        let mut expected = vec![0.0; m];
        for j in 0..l {
            for t in 0..m {
                expected[t] += weights[j] * h[j * m + t];
            }
        }

        let mut tape = Tape::new();
        let ht = leaf(&mut tape, h, &[l, m]);
        let wt = leaf(&mut tape, w_tanh, &[m, m]);
        let ws = leaf(&mut tape, w_sigm, &[m, m]);
        let wsc = leaf(&mut tape, w_score, &[m, 1]);
        let (z, s) = gated_attention_pool(&mut tape, ht, &[true; 3], wt, ws, wsc).unwrap();
        for (got, want) in tape.value(s).iter().zip(weights.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in tape.value(z).iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bag_score_spot_cases() {
        let mut tape = Tape::new();
        let feat = leaf(&mut tape, vec![0.5, -1.0, 2.0], &[1, 3]);
        let w = leaf(&mut tape, vec![0.0, 0.0, 0.0], &[3, 1]);
        let b = leaf(&mut tape, vec![0.0], &[1]);
        let prob = bag_score(&mut tape, feat, w, b).unwrap();
        assert_eq!(tape.item(prob), 0.5);

        let mut tape = Tape::new();
        let feat = leaf(&mut tape, vec![0.3, -0.9], &[1, 2]);
        let w = leaf(&mut tape, vec![1.25, -0.4], &[2, 1]);
        let b = leaf(&mut tape, vec![0.2], &[1]);
        let prob = bag_score(&mut tape, feat, w, b).unwrap();
        let logit: f64 = 0.3 * 1.25 + (-0.9) * (-0.4) + 0.2;
        let expected = 1.0 / (1.0 + (-logit).exp());
        assert!((tape.item(prob) - expected).abs() < 1e-12);
    }

    #[test]
    fn embed_matches_gather_and_pads_are_zero() {
        let bags = sample_bags();
        let vocab = Vocabulary::build(&bags);
        let config = tiny_config(vocab.table_rows());
        let params = ParameterSet::init(&config, 9).unwrap();
        let batch = &batchify(&bags, &vocab, 8).unwrap()[0];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let table = params.get(EMBEDDING_PARAM).unwrap();
        for b in 0..batch.batch {
            let x = embed_bag(&mut tape, bound.id(EMBEDDING_PARAM), batch.row_ids(b)).unwrap();
            let values = tape.value(x);
            for (slot, &id) in batch.row_ids(b).iter().enumerate() {
                let row = &values[slot * config.d_model..(slot + 1) * config.d_model];
                let expected = &table.data()
                    [id as usize * config.d_model..(id as usize + 1) * config.d_model];
                assert_eq!(row, expected);
                if !batch.row_mask(b)[slot] {
                    assert!(row.iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_in_range() {
        let bags = sample_bags();
        let vocab = Vocabulary::build(&bags);
        let config = tiny_config(vocab.table_rows());
        let params = ParameterSet::init(&config, 3).unwrap();
        let batch = &batchify(&bags, &vocab, 8).unwrap()[0];
        let run = || {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            forward(&mut tape, batch, &bound, &config)
                .unwrap()
                .prob_values
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for p in &a {
            assert!(*p > 0.0 && *p < 1.0);
        }
    }

    #[test]
    fn forward_attention_weights_normalized() {
        let bags = sample_bags();
        let vocab = Vocabulary::build(&bags);
        let config = tiny_config(vocab.table_rows());
        let params = ParameterSet::init(&config, 3).unwrap();
        let batch = &batchify(&bags, &vocab, 8).unwrap()[0];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = forward(&mut tape, batch, &bound, &config).unwrap();
        for (b, weights) in out.attention.iter().enumerate() {
            assert_eq!(weights.len(), bags[b].tokens.len());
            let total: f64 = weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_instances_leaves_probability_unchanged() {
        let bags = sample_bags();
        let vocab = Vocabulary::build(&bags);
        let config = tiny_config(vocab.table_rows());
        let params = ParameterSet::init(&config, 13).unwrap();

        let probe = |bags: &[Bag]| {
            let batch = &batchify(bags, &vocab, 8).unwrap()[0];
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            forward(&mut tape, batch, &bound, &config)
                .unwrap()
                .prob_values
        };
        let base = probe(&bags);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut shuffled = bags.clone();
        for bag in &mut shuffled {
            bag.tokens.shuffle(&mut rng);
        }
        let permuted = probe(&shuffled);
        for (a, b) in base.iter().zip(permuted.iter()) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn baseline_kinds_run_and_mi_net_single_instance() {
        let bags = vec![Bag {
            id: "single".into(),
            tokens: vec!["a".into()],
            label: 1,
        }];
        let vocab = Vocabulary::build(&bags);
        for kind in [
            ModelKind::MiNet,
            ModelKind::BigMiNet,
            ModelKind::AttNet,
            ModelKind::GatedAttNet,
        ] {
            let mut config = tiny_config(vocab.table_rows());
            config.model_kind = kind;
            let params = ParameterSet::init(&config, 1).unwrap();
            let batch = &batchify(&bags, &vocab, 4).unwrap()[0];
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let out = forward(&mut tape, batch, &bound, &config).unwrap();
            assert!(out.prob_values[0] > 0.0 && out.prob_values[0] < 1.0);
        }
    }

    #[test]
    fn att_net_matches_constructed_gated_equivalent() {
        // with the sigmoid-branch weights zeroed the gate is constant 0.5;
        // doubling the score vector recovers the plain attention net
        let bags = sample_bags();
        let vocab = Vocabulary::build(&bags);
        let mut att_config = tiny_config(vocab.table_rows());
        att_config.model_kind = ModelKind::AttNet;
        let att_params = ParameterSet::init(&att_config, 31).unwrap();

        let mut gated_config = att_config.clone();
        gated_config.model_kind = ModelKind::GatedAttNet;
        let mut gated_params = ParameterSet::init(&gated_config, 31).unwrap();
        let m = att_config.representation_dim();

        // align shared trunk + scorer, then construct the gate equivalence
        for name in att_params.tensors().keys() {
            if let Some(target) = gated_params.get_mut(name) {
                target
                    .data_mut()
                    .copy_from_slice(att_params.get(name).unwrap().data());
            }
        }
        let w_tanh = att_params.get("attpool.w_tanh").unwrap().data().to_vec();
        gated_params
            .get_mut("gatepool.w_tanh")
            .unwrap()
            .data_mut()
            .copy_from_slice(&w_tanh);
        gated_params
            .get_mut("gatepool.w_sigm")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let doubled: Vec<f64> = att_params
            .get("attpool.w_score")
            .unwrap()
            .data()
            .iter()
            .map(|v| 2.0 * v)
            .collect();
        gated_params
            .get_mut("gatepool.w_score")
            .unwrap()
            .data_mut()
            .copy_from_slice(&doubled);
        assert_eq!(doubled.len(), m);

        let batch = &batchify(&bags, &vocab, 8).unwrap()[0];
        let mut tape = Tape::new();
        let bound = att_params.bind(&mut tape);
        let att_out = forward(&mut tape, batch, &bound, &att_config).unwrap();
        let mut tape = Tape::new();
        let bound = gated_params.bind(&mut tape);
        let gated_out = forward(&mut tape, batch, &bound, &gated_config).unwrap();
        for (a, b) in att_out
            .prob_values
            .iter()
            .zip(gated_out.prob_values.iter())
        {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
