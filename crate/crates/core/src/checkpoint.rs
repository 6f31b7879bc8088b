//! JSON checkpoints: arrays keyed by parameter path plus the metadata
//! needed to rebuild the networks that own them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::numerics::NdArray;
use crate::vpsde::ScheduleMeta;

pub const CHECKPOINT_FORMAT: &str = "agentpose-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub kind: String,
    pub config_hash: String,
    pub schedule: Option<ScheduleMeta>,
    /// Free-form description of the stored networks.
    pub meta: serde_json::Value,
    pub params: BTreeMap<String, NdArray>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str, schedule: Option<ScheduleMeta>, meta: serde_json::Value) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            schedule,
            meta,
            params: BTreeMap::new(),
        }
    }

    /// Stores every parameter of `module` under `prefix.`.
    pub fn insert_module(&mut self, prefix: &str, module: &dyn Module) {
        for (k, p) in module.params() {
            self.params.insert(format!("{prefix}.{k}"), p.value.clone());
        }
    }

    /// Overwrites the parameters of `module` from entries under `prefix.`.
    pub fn load_module(&self, prefix: &str, module: &mut dyn Module) -> Result<()> {
        let keys: Vec<String> = module.params().into_iter().map(|(k, _)| format!("{prefix}.{k}")).collect();
        for (key, p) in keys.iter().zip(module.params_mut()) {
            let v = self
                .params
                .get(key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{key}`")))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{key}` has shape {:?}, expected {:?}",
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
            p.grad = None;
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.params.keys().any(|k| k.starts_with(&p))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        Ok(ck)
    }
}
