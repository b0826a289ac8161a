//! Dataset model: bags of token instances, vocabulary, padded batching,
//! stratified cross-validation splits, and a synthetic witness-bag generator.
//!
//! The on-disk format is newline-delimited JSON, one record per line:
//! `{"id": "optional", "instances": ["tok", ...], "label": 0}`.

use std::collections::HashMap;
use std::path::Path;

use rand::prelude::*;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::derive_seed;

/// Token id 0 is reserved for padding and never assigned to a real token.
pub const PAD_ID: u32 = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("bag {id}: instances must be nonempty")]
    EmptyBag { id: String },
    #[error("line {line}: label must be 0 or 1, got {label}")]
    BadLabel { line: usize, label: i64 },
    #[error("unknown token {token:?} in bag {bag_id}")]
    UnknownToken { token: String, bag_id: String },
    #[error("stratified split needs at least {k} bags per class, class {label} has {count}")]
    ClassTooSmall { k: usize, label: u8, count: usize },
    #[error("synthetic spec invalid: {0}")]
    BadSynthSpec(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// One record: an ordered-as-loaded, semantically unordered set of token
/// instances plus a binary label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bag {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: u8,
}

#[derive(Serialize, Deserialize)]
struct BagRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    instances: Vec<String>,
    label: i64,
}

/// Loads newline-delimited records in file order. Duplicate tokens within a
/// bag are kept as-is; a missing id is autogenerated from the line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<Bag>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut bags = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: BagRecord =
            serde_json::from_str(line).map_err(|e| DataError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        if record.label != 0 && record.label != 1 {
            return Err(DataError::BadLabel {
                line: line_no,
                label: record.label,
            });
        }
        let id = record.id.unwrap_or_else(|| format!("bag{line_no}"));
        if record.instances.is_empty() {
            return Err(DataError::EmptyBag { id });
        }
        bags.push(Bag {
            id,
            tokens: record.instances,
            label: record.label as u8,
        });
    }
    Ok(bags)
}

/// Writes bags in the same newline-delimited format `load_jsonl` reads.
pub fn to_jsonl(bags: &[Bag]) -> String {
    let mut out = String::new();
    for bag in bags {
        let record = BagRecord {
            id: Some(bag.id.clone()),
            instances: bag.tokens.clone(),
            label: bag.label as i64,
        };
        out.push_str(&serde_json::to_string(&record).expect("bag serialization cannot fail"));
        out.push('\n');
    }
    out
}

/// Bidirectional token <-> id map. Ids start at 1; 0 is the pad id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>, // index 0 holds the pad placeholder
}

impl Vocabulary {
    /// Assigns ids 1..=T in first-appearance order over the given bags.
    pub fn build(bags: &[Bag]) -> Self {
        let mut token_to_id = HashMap::new();
        let mut id_to_token = vec!["<pad>".to_string()];
        for bag in bags {
            for token in &bag.tokens {
                if !token_to_id.contains_key(token) {
                    let id = id_to_token.len() as u32;
                    token_to_id.insert(token.clone(), id);
                    id_to_token.push(token.clone());
                }
            }
        }
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Reconstructs a vocabulary from tokens listed in id order (1..).
    pub fn from_tokens(tokens: &[String]) -> Self {
        let mut token_to_id = HashMap::new();
        let mut id_to_token = vec!["<pad>".to_string()];
        for token in tokens {
            let id = id_to_token.len() as u32;
            token_to_id.insert(token.clone(), id);
            id_to_token.push(token.clone());
        }
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Number of distinct real tokens (pad excluded).
    pub fn num_tokens(&self) -> usize {
        self.id_to_token.len() - 1
    }

    /// Embedding-table row count: real tokens plus the pad row.
    pub fn table_rows(&self) -> usize {
        self.id_to_token.len()
    }

    /// Real tokens in id order, for checkpoint embedding.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[1..]
    }
}

/// A padded rectangular block of token ids with a validity mask.
#[derive(Debug, Clone)]
pub struct BatchedBags {
    /// row-major [batch, width]; padded slots hold `PAD_ID`
    pub token_ids: Vec<u32>,
    /// true exactly at real-token positions
    pub mask: Vec<bool>,
    pub labels: Vec<u8>,
    pub bag_ids: Vec<String>,
    pub batch: usize,
    pub width: usize,
}

impl BatchedBags {
    pub fn row_ids(&self, b: usize) -> &[u32] {
        &self.token_ids[b * self.width..(b + 1) * self.width]
    }

    pub fn row_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.width..(b + 1) * self.width]
    }
}

/// Packs bags into blocks of at most `batch_size`, padding each block to its
/// own longest bag. The final short batch is kept.
pub fn batchify(
    bags: &[Bag],
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<Vec<BatchedBags>, DataError> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut batches = Vec::new();
    for chunk in bags.chunks(batch_size) {
        let width = chunk.iter().map(|b| b.tokens.len()).max().unwrap_or(1);
        let batch = chunk.len();
        let mut token_ids = vec![PAD_ID; batch * width];
        let mut mask = vec![false; batch * width];
        let mut labels = Vec::with_capacity(batch);
        let mut bag_ids = Vec::with_capacity(batch);
        for (row, bag) in chunk.iter().enumerate() {
            for (col, token) in bag.tokens.iter().enumerate() {
                let id = vocab.id_of(token).ok_or_else(|| DataError::UnknownToken {
                    token: token.clone(),
                    bag_id: bag.id.clone(),
                })?;
                token_ids[row * width + col] = id;
                mask[row * width + col] = true;
            }
            labels.push(bag.label);
            bag_ids.push(bag.id.clone());
        }
        batches.push(BatchedBags {
            token_ids,
            mask,
            labels,
            bag_ids,
            batch,
            width,
        });
    }
    Ok(batches)
}

/// One cross-validation assignment: indices into the source bag list.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub repetition: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Per repetition: a seeded shuffle followed by per-class round-robin
/// assignment to validation folds, so fold sizes differ by at most one per
/// class. Every bag lands in exactly one validation fold per repetition.
pub fn stratified_kfold(
    bags: &[Bag],
    k: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>, DataError> {
    assert!(k >= 2, "k must be at least 2");
    for label in [0u8, 1u8] {
        let count = bags.iter().filter(|b| b.label == label).count();
        if count < k {
            return Err(DataError::ClassTooSmall { k, label, count });
        }
    }
    let mut splits = Vec::with_capacity(repetitions * k);
    for rep in 0..repetitions {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[rep as u64]));
        let mut order: Vec<usize> = (0..bags.len()).collect();
        order.shuffle(&mut rng);
        let mut fold_of = vec![0usize; bags.len()];
        for label in [0u8, 1u8] {
            let mut counter = 0usize;
            for &idx in &order {
                if bags[idx].label == label {
                    fold_of[idx] = counter % k;
                    counter += 1;
                }
            }
        }
        for fold in 0..k {
            let val: Vec<usize> = (0..bags.len()).filter(|i| fold_of[*i] == fold).collect();
            let train: Vec<usize> = (0..bags.len()).filter(|i| fold_of[*i] != fold).collect();
            splits.push(FoldSplit {
                repetition: rep,
                fold,
                train,
                val,
            });
        }
    }
    Ok(splits)
}

/// Single stratified holdout: per class, a seeded shuffle then a split at
/// `round(val_fraction * class_size)`, clamped so both sides keep at least
/// one member of each class. Returns sorted (train, val) index lists.
pub fn stratified_holdout(
    bags: &[Bag],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::BadSynthSpec(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [0u8, 1u8] {
        let mut members: Vec<usize> = (0..bags.len())
            .filter(|&i| bags[i].label == label)
            .collect();
        if members.len() < 2 {
            return Err(DataError::ClassTooSmall {
                k: 2,
                label,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_val = ((val_fraction * members.len() as f64).round() as usize)
            .clamp(1, members.len() - 1);
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Stable digest of a set of splits; sweep arms assert it matches across arms.
pub fn splits_digest(splits: &[FoldSplit]) -> String {
    let mut bytes = Vec::new();
    for s in splits {
        bytes.extend_from_slice(&(s.repetition as u64).to_le_bytes());
        bytes.extend_from_slice(&(s.fold as u64).to_le_bytes());
        for &i in &s.val {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
        }
    }
    crate::util::digest_hex(&bytes)
}

/// Generator settings for synthetic witness datasets.
///
/// In the plain setting every positive bag contains exactly one witness token
/// and negatives contain none, realizing the standard presence assumption.
/// With `correlated` set, positives contain two distinct witness tokens while
/// negatives carry one witness duplicated, so the label depends on witness
/// co-occurrence rather than witness presence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_bags: usize,
    pub vocab_size: usize,
    pub num_witness_tokens: usize,
    pub positive_rate: f64,
    pub bag_length_range: (usize, usize),
    pub correlated: bool,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.bag_length_range;
        if self.num_bags == 0 {
            return Err(DataError::BadSynthSpec("num_bags must be positive".into()));
        }
        if self.num_witness_tokens == 0 || self.num_witness_tokens >= self.vocab_size {
            return Err(DataError::BadSynthSpec(format!(
                "num_witness_tokens must be in [1, vocab_size), got {} of {}",
                self.num_witness_tokens, self.vocab_size
            )));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(DataError::BadSynthSpec(format!(
                "positive_rate must be in (0, 1), got {}",
                self.positive_rate
            )));
        }
        if lo < 1 || hi < lo {
            return Err(DataError::BadSynthSpec(format!(
                "bag_length_range must satisfy 1 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        if self.correlated && lo < 2 {
            return Err(DataError::BadSynthSpec(
                "correlated bags need a minimum length of 2".into(),
            ));
        }
        if self.correlated && self.num_witness_tokens < 2 {
            return Err(DataError::BadSynthSpec(
                "correlated bags need at least 2 witness tokens".into(),
            ));
        }
        Ok(())
    }
}

pub fn witness_token(i: usize) -> String {
    format!("wit{i:02}")
}

fn background_token(i: usize) -> String {
    format!("sym{i:03}")
}

/// Deterministically generates bags per the spec. The positive count is
/// exactly `round(positive_rate * num_bags)`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Bag>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_bags;
    let positives = (spec.positive_rate * n as f64).round() as usize;
    let mut labels = vec![0u8; n];
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);
    for &slot in slots.iter().take(positives) {
        labels[slot] = 1;
    }
    let witness_count = spec.num_witness_tokens;
    let background_count = spec.vocab_size - witness_count;
    let (lo, hi) = spec.bag_length_range;
    let mut bags = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let len = rng.random_range(lo..=hi);
        let mut tokens: Vec<String> = Vec::with_capacity(len);
        if spec.correlated {
            if label == 1 {
                // two distinct witnesses
                let a = rng.random_range(0..witness_count);
                let mut b = rng.random_range(0..witness_count - 1);
                if b >= a {
                    b += 1;
                }
                tokens.push(witness_token(a));
                tokens.push(witness_token(b));
            } else {
                // one witness, duplicated
                let a = rng.random_range(0..witness_count);
                tokens.push(witness_token(a));
                tokens.push(witness_token(a));
            }
        } else if label == 1 {
            tokens.push(witness_token(rng.random_range(0..witness_count)));
        }
        while tokens.len() < len {
            tokens.push(background_token(rng.random_range(0..background_count)));
        }
        tokens.shuffle(&mut rng);
        bags.push(Bag {
            id: format!("bag{i:05}"),
            tokens,
            label,
        });
    }
    Ok(bags)
}

/// True when the bag holds any witness token; the rule-based oracle for the
/// plain generator.
pub fn has_witness(bag: &Bag, num_witness_tokens: usize) -> bool {
    bag.tokens
        .iter()
        .any(|t| (0..num_witness_tokens).any(|i| t == &witness_token(i)))
}

/// True when the bag holds two distinct witness tokens; the oracle for the
/// correlated generator.
pub fn has_distinct_witness_pair(bag: &Bag, num_witness_tokens: usize) -> bool {
    let mut seen = std::collections::HashSet::new();
    for t in &bag.tokens {
        if (0..num_witness_tokens).any(|i| t == &witness_token(i)) {
            seen.insert(t.clone());
        }
    }
    seen.len() >= 2
}
