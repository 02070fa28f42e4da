//! Trained-model files: parameters in the binary checkpoint container plus a
//! JSON metadata block with the model config, vocabulary and run provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spanedit_autodiff::{Checkpoint, Precision};

use crate::corpus::Vocab;
use crate::model::{Model, ModelConfig};
use crate::{Error, Result};

/// Version of the metadata layout stored inside checkpoints and reports.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    format_version: u32,
    config_hash: String,
    model: ModelConfig,
    vocab: Vec<String>,
    #[serde(default)]
    run: serde_json::Value,
}

/// A model together with the vocabulary it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub vocab: Vocab,
    /// Hash of the run configuration that produced the model.
    pub config_hash: String,
    /// Free-form run description (seeds, objective, data paths).
    pub run: serde_json::Value,
}

impl TrainedModel {
    pub fn to_bytes(&self, precision: Precision) -> Result<Vec<u8>> {
        let meta = Metadata {
            format_version: ARTIFACT_VERSION,
            config_hash: self.config_hash.clone(),
            model: self.model.config().clone(),
            vocab: self.vocab.surfaces().to_vec(),
            run: self.run.clone(),
        };
        let json = serde_json::to_string(&meta)
            .map_err(|e| Error::Internal(format!("metadata serialization: {e}")))?;
        let mut ckpt = Checkpoint::new(json);
        ckpt.precision = precision;
        let params = self.model.params();
        for (name, value) in params.names().iter().zip(params.values()) {
            ckpt.tensors.insert(name.clone(), value.clone());
        }
        Ok(ckpt.encode())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt = Checkpoint::decode(bytes)?;
        let meta: Metadata = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Validation(format!("checkpoint metadata: {e}")))?;
        if meta.format_version != ARTIFACT_VERSION {
            return Err(Error::Validation(format!(
                "checkpoint metadata: format_version {} (supported: {ARTIFACT_VERSION})",
                meta.format_version
            )));
        }
        let mut text = meta.vocab.join("\n");
        text.push('\n');
        let vocab = Vocab::from_text(&text)?;
        if vocab.len() != meta.model.vocab_size {
            return Err(Error::Validation(format!(
                "checkpoint metadata: vocabulary has {} entries, model expects {}",
                vocab.len(),
                meta.model.vocab_size
            )));
        }
        if ckpt.tensors.len() != Model::new(meta.model.clone())?.params().len() {
            return Err(Error::Validation(format!(
                "checkpoint: {} tensors do not match the model layout",
                ckpt.tensors.len()
            )));
        }
        let model = Model::from_tensors(meta.model, |name| ckpt.tensors.get(name))?;
        Ok(Self {
            model,
            vocab,
            config_hash: meta.config_hash,
            run: meta.run,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes(Precision::F64)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
