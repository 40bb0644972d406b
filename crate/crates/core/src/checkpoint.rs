//! Checkpoint directories: `manifest.json` plus raw little-endian `params.bin`.
//!
//! The manifest carries the format version, model config, vocabulary,
//! dictionary, the element type of `params.bin`, and an ordered tensor index
//! of `{name, shape, offset}` with byte offsets. Parameters are written in the
//! model's own precision so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{G2pError, Result};
use crate::model::{G2pModel, ModelConfig};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{PolyphoneDictionary, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub dict: PolyphoneDictionary,
    pub tensors: Vec<TensorEntry>,
}

/// Serialises a model into manifest JSON and parameter bytes.
pub fn encode<S: Scalar>(model: &G2pModel<S>) -> Result<(String, Vec<u8>)> {
    let mut bytes = Vec::with_capacity(model.store.num_scalars() * S::BYTES);
    let mut tensors = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: bytes.len(),
        });
        for &x in p.value.data() {
            x.write_le(&mut bytes);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: S::DTYPE.to_string(),
        config: model.config,
        vocab: model.vocab.clone(),
        dict: model.dict.clone(),
        tensors,
    };
    Ok((serde_json::to_string_pretty(&manifest)?, bytes))
}

fn read_values<S: Scalar>(dtype: &str, bytes: &[u8]) -> Result<Vec<S>> {
    Ok(match dtype {
        "f64" => bytes.chunks_exact(8).map(|c| S::from_f64(f64::read_le(c))).collect(),
        "f32" => bytes.chunks_exact(4).map(|c| S::from_f64(f32::read_le(c).to_f64())).collect(),
        other => return Err(G2pError::Data(format!("unknown checkpoint dtype `{other}`"))),
    })
}

/// Rebuilds a model from manifest JSON and parameter bytes, converting to `S`
/// if the stored precision differs.
pub fn decode<S: Scalar>(manifest_json: &str, bytes: &[u8]) -> Result<G2pModel<S>> {
    let manifest: Manifest = serde_json::from_str(manifest_json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(G2pError::Data(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let width = match manifest.dtype.as_str() {
        "f64" => 8,
        "f32" => 4,
        other => return Err(G2pError::Data(format!("unknown checkpoint dtype `{other}`"))),
    };
    let mut model = G2pModel::<S>::from_config(manifest.config, manifest.vocab, manifest.dict, 0)?;
    if manifest.tensors.len() != model.store.len() {
        return Err(G2pError::Data(format!(
            "checkpoint holds {} tensors, model expects {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let mut expected_offset = 0;
    for entry in &manifest.tensors {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| G2pError::Data(format!("unexpected tensor `{}`", entry.name)))?;
        let param = model.store.get_mut(id);
        if param.value.shape() != entry.shape.as_slice() {
            return Err(G2pError::shape("checkpoint", &entry.shape, param.value.shape()));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * width;
        if entry.offset != expected_offset || end > bytes.len() {
            return Err(G2pError::Data(format!("tensor `{}` has a bad offset", entry.name)));
        }
        param.value = Tensor::new(entry.shape.clone(), read_values(&manifest.dtype, &bytes[entry.offset..end])?)?;
        expected_offset = end;
    }
    if expected_offset != bytes.len() {
        return Err(G2pError::Data("trailing bytes in parameter file".into()));
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &G2pModel<S>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| G2pError::io(dir, e))?;
    let (manifest, bytes) = encode(model)?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| G2pError::io(&mpath, e))?;
    let ppath = dir.join(PARAMS_FILE);
    fs::write(&ppath, bytes).map_err(|e| G2pError::io(&ppath, e))
}

pub fn load_checkpoint<S: Scalar>(dir: impl AsRef<Path>) -> Result<G2pModel<S>> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&mpath).map_err(|e| G2pError::io(&mpath, e))?;
    let ppath = dir.join(PARAMS_FILE);
    let bytes = fs::read(&ppath).map_err(|e| G2pError::io(&ppath, e))?;
    decode(&manifest, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_sandhi_corpus, load_corpus_str, VocabMode};
    use crate::reinforcer::{ReinforcerConfig, ReinforcerKind};
    use crate::sequence::{LmConfig, LmKind};

    fn model(lm: LmKind) -> G2pModel<f64> {
        let synth = gen_sandhi_corpus(8, 1);
        let c = load_corpus_str(&synth.text, Some(&synth.lexicon), VocabMode::Build).unwrap();
        G2pModel::new(
            8,
            ReinforcerConfig::new(ReinforcerKind::Sso),
            LmConfig::new(lm, 1, 8, 16),
            c.vocab,
            c.dict,
            5,
        )
        .unwrap()
    }

    fn same_params<S: Scalar>(a: &G2pModel<S>, b: &G2pModel<S>) -> bool {
        a.store
            .iter()
            .zip(b.store.iter())
            .all(|((_, p), (_, q))| p.name == q.name && p.value == q.value)
    }

    #[test]
    fn roundtrip_is_bit_exact_in_both_precisions() {
        let dir = tempfile::tempdir().unwrap();
        for lm in [LmKind::Transformer, LmKind::Mixer] {
            let m = model(lm);
            save_checkpoint(&m, dir.path()).unwrap();
            let back: G2pModel<f64> = load_checkpoint(dir.path()).unwrap();
            assert!(same_params(&m, &back));
            assert_eq!(back.vocab, m.vocab);
            assert_eq!(back.dict, m.dict);

            let m32: G2pModel<f32> = m.cast();
            save_checkpoint(&m32, dir.path()).unwrap();
            let back32: G2pModel<f32> = load_checkpoint(dir.path()).unwrap();
            assert!(same_params(&m32, &back32));
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = model(LmKind::Mixer);
        let (manifest, bytes) = encode(&m).unwrap();
        assert!(decode::<f64>(&manifest, &bytes[..bytes.len() - 8]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f64>(&manifest, &extra).is_err());
        let wrong = manifest.replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(decode::<f64>(&wrong, &bytes).is_err());
        assert!(load_checkpoint::<f64>("/nonexistent/ckpt").is_err());
    }
}
