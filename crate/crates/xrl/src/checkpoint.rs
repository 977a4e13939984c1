//! Versioned model checkpoints: a single JSON document holding the
//! ModelSpec, training-config digest, and weight arrays encoded as base64
//! little-endian f64 bytes, so round-trips are bit-identical.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelSpec, ParamSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    spec: ModelSpec,
    train_digest: String,
    seed: u64,
    weights: Vec<WeightEntry>,
}

fn encode_tensor(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_tensor(name: &str, shape: &[usize], b64: &str) -> Result<Tensor> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| Error::Checkpoint(format!("weight '{}': invalid base64: {}", name, e)))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Checkpoint(format!(
            "weight '{}': payload is {} bytes, shape {:?} needs {}",
            name,
            bytes.len(),
            shape,
            n * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn save_checkpoint(
    params: &ParamSet,
    spec: &ModelSpec,
    train_digest: &str,
    path: &Path,
) -> Result<()> {
    let doc = CheckpointDoc {
        version: CHECKPOINT_VERSION,
        spec: spec.clone(),
        train_digest: train_digest.to_string(),
        seed: params.seed,
        weights: params
            .entries()
            .iter()
            .map(|(name, t)| WeightEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data_b64: encode_tensor(t),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Checkpoint(format!("serialize: {}", e)))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Load and validate a checkpoint. The stored weights must belong to the
/// stored spec (digest check); version mismatches refuse to load.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, ModelSpec)> {
    let text = std::fs::read_to_string(path)?;
    let doc: CheckpointDoc = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("parse: {}", e)))?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} unsupported (expected {})",
            doc.version, CHECKPOINT_VERSION
        )));
    }
    doc.spec.validate()?;
    let entries = doc
        .weights
        .iter()
        .map(|w| Ok((w.name.clone(), decode_tensor(&w.name, &w.shape, &w.data_b64)?)))
        .collect::<Result<Vec<_>>>()?;
    let spec_digest = doc.spec.digest();
    let params = ParamSet::from_entries(entries, doc.seed, spec_digest.clone());
    // structural check: the weights must compose with the stored spec
    let reference = crate::nn::build_model(&doc.spec, 0)?;
    if reference.entries().len() != params.entries().len()
        || reference
            .entries()
            .iter()
            .zip(params.entries())
            .any(|((rn, rt), (n, t))| rn != n || rt.shape() != t.shape())
    {
        return Err(Error::Digest(format!(
            "checkpoint weights do not match spec digest {}",
            spec_digest
        )));
    }
    Ok((params, doc.spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;

    fn spec() -> ModelSpec {
        ModelSpec::conv_net((1, 8, 8), 3, 5.0)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let s = spec();
        let params = build_model(&s, 42).unwrap();
        save_checkpoint(&params, &s, "traincfg", &p).unwrap();
        let (back, back_spec) = load_checkpoint(&p).unwrap();
        assert_eq!(back.entries(), params.entries());
        assert_eq!(back.seed, 42);
        assert_eq!(back_spec.digest(), s.digest());
    }

    #[test]
    fn version_mismatch_refuses_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let s = spec();
        let params = build_model(&s, 1).unwrap();
        save_checkpoint(&params, &s, "x", &p).unwrap();
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 99");
        std::fs::write(&p, text).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version 99"), "{}", msg),
            other => panic!("expected version error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn corrupted_base64_names_the_weight() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let s = spec();
        let params = build_model(&s, 2).unwrap();
        save_checkpoint(&params, &s, "x", &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        // mangle the first payload
        let idx = text.find("\"data_b64\": \"").unwrap() + "\"data_b64\": \"".len();
        let mut mangled = text.clone();
        mangled.replace_range(idx..idx + 4, "!!!!");
        std::fs::write(&p, mangled).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint(msg)) => {
                assert!(msg.contains("layer0.weight"), "{}", msg);
                assert!(msg.contains("base64"), "{}", msg);
            }
            other => panic!("expected checkpoint error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn weights_for_wrong_spec_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let s = spec();
        let params = build_model(&s, 3).unwrap();
        // claim these weights belong to a different architecture
        let other = ModelSpec::linear((1, 8, 8), 3);
        save_checkpoint(&params, &other, "x", &p).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Digest(_))));
    }
}
