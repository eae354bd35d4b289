//! Single-file checkpoints: named tensors in safetensors layout plus JSON
//! metadata.
//!
//! Parameter tensors keep their store names (`encoder_a.stage0.conv.weight`,
//! ...). Optimizer moments are stored under `opt_g.` / `opt_d.` prefixes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ModelConfig;
use crate::nn::{ParamGroup, ParamStore};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "facepencil";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Stage the run is in (0 for a bare classifier checkpoint).
    pub stage: u8,
    /// Steps completed within `stage`.
    pub step: usize,
    pub g_opt_steps: u64,
    pub d_opt_steps: u64,
    /// Training configuration as JSON, when saved by the trainer.
    pub train_config: Option<serde_json::Value>,
    /// Free-form note, e.g. why a diagnostic checkpoint was written.
    pub note: Option<String>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model,
            stage: 0,
            step: 0,
            g_opt_steps: 0,
            d_opt_steps: 0,
            train_config: None,
            note: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Parameters from `store`, restricted to `groups`.
    pub fn from_store(meta: CheckpointMeta, store: &ParamStore, groups: &[ParamGroup]) -> Self {
        let tensors = store
            .vars_in(groups)
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        Self { meta, tensors }
    }

    pub fn insert_prefixed(&mut self, prefix: &str, tensors: BTreeMap<String, Tensor>) {
        for (k, v) in tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn prefixed(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Parameter tensors only (optimizer state excluded).
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| ParamStore::group_of(k).is_ok())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        safetensors::serialize(self.tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                meta.format_version
            )));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .into_iter()
            .collect();
        Ok(Self { meta, tensors })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Copies every tensor of `groups` from `values` into `store`.
pub fn load_groups(store: &ParamStore, values: &BTreeMap<String, Tensor>, groups: &[ParamGroup]) -> Result<()> {
    for (name, var) in store.vars_in(groups) {
        let t = values
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} vs expected {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}
