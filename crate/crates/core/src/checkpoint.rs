//! Self-describing JSON checkpoints.
//!
//! Every file carries a format version, a `kind` tag and the SHA-256 content
//! hash of its model (config plus weights). Filter checkpoints store the hash
//! of the surrogate they were trained against and refuse any other.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{ParamStore, TensorRecord};
use crate::surrogate::{Surrogate, SurrogateConfig};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub fn content_hash<C: Serialize>(config: &C, store: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for (name, t) in store.names().zip(store.tensors()) {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Writes through a sibling temp file and renames, so readers never see a
/// half-written checkpoint.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.partial");
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub(crate) fn check_header(path_hint: &str, kind: &str, expected_kind: &str, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("{path_hint}: format version {version}, expected {FORMAT_VERSION}")));
    }
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!("{path_hint}: a `{kind}` checkpoint, expected `{expected_kind}`")));
    }
    Ok(())
}

pub(crate) fn store_from_records(template: &ParamStore, records: &[TensorRecord]) -> Result<ParamStore> {
    let mut store = template.clone();
    store.load_records(records)?;
    Ok(store)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurrogateCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub content_hash: String,
    /// Carries `lambda` (λ_S) and the training distortion D_S.
    pub config: SurrogateConfig,
    pub seed: u64,
    pub iterations: u64,
    pub tensors: Vec<TensorRecord>,
}

impl Surrogate {
    pub fn to_checkpoint(&self) -> SurrogateCheckpoint {
        SurrogateCheckpoint {
            format_version: FORMAT_VERSION,
            kind: "surrogate".into(),
            content_hash: self.content_hash().to_string(),
            config: self.config().clone(),
            seed: self.seed,
            iterations: self.iterations,
            tensors: self.params().to_records(),
        }
    }

    pub fn from_checkpoint(ck: &SurrogateCheckpoint) -> Result<Self> {
        check_header("surrogate checkpoint", &ck.kind, "surrogate", ck.format_version)?;
        let template = Surrogate::new(ck.config.clone(), ck.seed)?;
        let store = store_from_records(template.params(), &ck.tensors)?;
        let s = Surrogate::from_parts(ck.config.clone(), store, ck.seed, ck.iterations)?;
        if s.content_hash() != ck.content_hash {
            return Err(Error::Checkpoint("surrogate checkpoint content hash mismatch (corrupted file?)".into()));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_json(path)?)
    }
}
