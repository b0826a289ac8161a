//! Self-describing checkpoint file: a magic line, a JSON header carrying the
//! config, vocabulary, and tensor manifest, then raw little-endian f64 data.
//! Round-trips are bit-exact. Writes go through a temp file and rename.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::bagdata::Vocabulary;
use crate::util::write_atomic;

use super::{ModelConfig, ModelError, ParameterSet};

pub const CHECKPOINT_FORMAT: &str = "milnet-ckpt-v1";

const MAGIC: &[u8] = b"milnet-ckpt-v1\n";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorMeta>,
}

/// Everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
}

pub fn save_checkpoint(
    params: &ParameterSet,
    config: &ModelConfig,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<(), ModelError> {
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.clone(),
        vocab: vocab.tokens().to_vec(),
        tensors: params
            .tensors()
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 4 + header_json.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for tensor in params.tensors().values() {
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })?;
    let fail = |msg: &str| ModelError::CheckpointFormat(msg.to_string());
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail("missing or unsupported format tag"));
    }
    let mut offset = MAGIC.len();
    let header_len =
        u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
    offset += 4;
    if bytes.len() < offset + header_len {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[offset..offset + header_len])
        .map_err(|e| ModelError::CheckpointFormat(format!("bad header: {e}")))?;
    offset += header_len;
    if header.format != CHECKPOINT_FORMAT {
        return Err(ModelError::CheckpointFormat(format!(
            "version mismatch: expected {CHECKPOINT_FORMAT}, found {}",
            header.format
        )));
    }
    header.config.validate()?;
    if header.vocab.len() + 1 != header.config.vocab_size {
        return Err(ModelError::CheckpointFormat(format!(
            "vocabulary lists {} tokens but config expects vocab_size {}",
            header.vocab.len(),
            header.config.vocab_size
        )));
    }

    let expected = ParameterSet::expected_shapes(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(ModelError::CheckpointFormat(format!(
            "tensor manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for meta in &header.tensors {
        match expected.get(&meta.name) {
            Some(shape) if *shape == meta.shape => {}
            Some(shape) => {
                return Err(ModelError::CheckpointShape {
                    name: meta.name.clone(),
                    expected: shape.clone(),
                    found: meta.shape.clone(),
                })
            }
            None => {
                return Err(ModelError::CheckpointFormat(format!(
                    "unexpected tensor {} in manifest",
                    meta.name
                )))
            }
        }
    }

    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != offset + total * 8 {
        return Err(fail("data section length does not match the manifest"));
    }
    let mut tensors = BTreeMap::new();
    for meta in &header.tensors {
        let numel: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(
                bytes[offset..offset + 8].try_into().unwrap(),
            ));
            offset += 8;
        }
        let tensor = Tensor::new(data, &meta.shape)
            .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?
            .with_requires_grad(true);
        tensors.insert(meta.name.clone(), tensor);
    }
    Ok(Checkpoint {
        params: ParameterSet::from_tensors(tensors),
        config: header.config,
        vocab: Vocabulary::from_tokens(&header.vocab),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::bagdata::{batchify, synth_generate, SynthSpec};
    use crate::model::forward;

    fn setup() -> (ParameterSet, ModelConfig, Vocabulary, Vec<crate::bagdata::Bag>) {
        let spec = SynthSpec {
            num_bags: 10,
            vocab_size: 12,
            num_witness_tokens: 2,
            positive_rate: 0.3,
            bag_length_range: (1, 5),
            correlated: false,
            seed: 2,
        };
        let bags = synth_generate(&spec).unwrap();
        let vocab = Vocabulary::build(&bags);
        let mut config = ModelConfig::new(vocab.table_rows());
        config.d_model = 8;
        config.num_heads = 2;
        config.fc_dims = vec![6, 4];
        let params = ParameterSet::init(&config, 44).unwrap();
        (params, config, vocab, bags)
    }

    #[test]
    fn round_trip_is_bit_exact_and_forward_identical() {
        let (params, config, vocab, bags) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, &vocab, &path).unwrap();
        let restored = load_checkpoint(&path).unwrap();
        assert_eq!(restored.params, params);
        assert_eq!(restored.config, config);
        assert_eq!(restored.vocab, vocab);

        let batch = &batchify(&bags, &vocab, 16).unwrap()[0];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let before = forward(&mut tape, batch, &bound, &config).unwrap().prob_values;
        let mut tape = Tape::new();
        let bound = restored.params.bind(&mut tape);
        let after = forward(&mut tape, batch, &bound, &restored.config)
            .unwrap()
            .prob_values;
        assert_eq!(before, after);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let (params, config, vocab, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, &vocab, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::CheckpointFormat(_))
        ));
    }

    #[test]
    fn edited_vocab_size_names_the_embedding_table() {
        let (params, config, vocab, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, &vocab, &path).unwrap();

        // rewrite the header with a larger vocab_size and matching fake vocab
        let bytes = std::fs::read(&path).unwrap();
        let header_len =
            u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().unwrap()) as usize;
        let mut header: Header =
            serde_json::from_slice(&bytes[MAGIC.len() + 4..MAGIC.len() + 4 + header_len]).unwrap();
        header.config.vocab_size += 1;
        header.vocab.push("intruder".into());
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut rewritten = Vec::new();
        rewritten.extend_from_slice(MAGIC);
        rewritten.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        rewritten.extend_from_slice(&new_header);
        rewritten.extend_from_slice(&bytes[MAGIC.len() + 4 + header_len..]);
        std::fs::write(&path, &rewritten).unwrap();

        match load_checkpoint(&path) {
            Err(ModelError::CheckpointShape { name, .. }) => {
                assert_eq!(name, crate::model::EMBEDDING_PARAM)
            }
            other => panic!("expected a shape mismatch naming the table, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"milnet-ckpt-v9\nxxxx").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("format"), "{err}");
    }
}
