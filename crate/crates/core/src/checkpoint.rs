//! JSON checkpoints: a config plus shape-tagged parameter tensors.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamSet;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub format_version: u32,
    /// `"segmenter"`, `"student"` or `"teacher"`.
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: C,
    pub params: ParamSet,
}

/// Short hex digest of a value's canonical JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl<C: Serialize + DeserializeOwned> Checkpoint<C> {
    pub fn new(kind: &str, seed: u64, config: C, params: ParamSet) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash(&config),
            seed,
            config,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} (expected {FORMAT_VERSION})",
                path.display(),
                ck.format_version
            )));
        }
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{}: holds a {} checkpoint, expected {kind}",
                path.display(),
                ck.kind
            )));
        }
        Ok(ck)
    }
}
