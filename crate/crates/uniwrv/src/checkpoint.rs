//! Checkpoint container: magic bytes `UWRV`, a 4-byte version, an 8-byte
//! manifest length, a UTF-8 TOML manifest (config, iteration, tensor
//! directory, bank usage counters), then the named tensors as little-endian
//! 32-bit floats in manifest order. Parameters are kept f32-representable
//! throughout training, so a save/load round trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, UniWrv};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"UWRV";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BankUsage {
    layer: usize,
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    iteration: u64,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    bank_usage: Vec<BankUsage>,
}

pub struct Loaded {
    pub model: UniWrv,
    pub store: ParamStore,
    pub iteration: u64,
}

pub fn save(path: &Path, model: &UniWrv, store: &ParamStore, iteration: u64) -> Result<()> {
    let manifest = Manifest {
        version: VERSION,
        iteration,
        config: model.config.clone(),
        tensors: store
            .ids()
            .map(|id| TensorEntry {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
            })
            .collect(),
        bank_usage: model
            .banks()
            .iter()
            .map(|b| BankUsage {
                layer: b.layer,
                counts: b.usage(),
            })
            .collect(),
    };
    let manifest_text =
        toml::to_string(&manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest_text.len() as u64).to_le_bytes());
    bytes.extend_from_slice(manifest_text.as_bytes());
    for id in store.ids() {
        for &v in store.get(id).data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Field-by-field config comparison for refusal messages.
fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let a = serde_json::to_value(expected).unwrap();
    let b = serde_json::to_value(found).unwrap();
    let mut diffs = Vec::new();
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (key, av) in a {
            let bv = &b[key];
            if av != bv {
                diffs.push(format!("{key}: expected {av}, checkpoint has {bv}"));
            }
        }
    }
    diffs
}

pub fn load(path: &Path) -> Result<Loaded> {
    load_impl(path, None)
}

/// Load and refuse (with an explicit diff) if the embedded config does not
/// match the expected one.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Loaded> {
    load_impl(path, Some(expected))
}

fn load_impl(path: &Path, expected: Option<&ModelConfig>) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest_text = std::str::from_utf8(&bytes[16..16 + manifest_len])
        .map_err(|e| Error::Checkpoint(format!("manifest is not UTF-8: {e}")))?;
    let manifest: Manifest = toml::from_str(manifest_text)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;

    if let Some(expected) = expected {
        let diffs = config_diff(expected, &manifest.config);
        if !diffs.is_empty() {
            return Err(Error::Checkpoint(format!(
                "config mismatch: {}",
                diffs.join("; ")
            )));
        }
    }

    let mut store = ParamStore::new();
    let model = UniWrv::new(&mut store, manifest.config.clone())?;
    if store.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            store.len()
        )));
    }

    let payload = &bytes[16 + manifest_len..];
    let mut offset = 0usize;
    for entry in &manifest.tensors {
        let id = store.find(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!("manifest names unknown tensor `{}`", entry.name))
        })?;
        let current = store.get(id);
        if current.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: shape {:?} in manifest, model expects {:?}",
                entry.name,
                entry.shape,
                current.shape()
            )));
        }
        let n = current.numel();
        let end = offset + 4 * n;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload ends inside tensor `{}`",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store.set_data(id, data);
        offset = end;
    }
    if offset != payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload has {} trailing bytes",
            payload.len() - offset
        )));
    }

    for usage in manifest.bank_usage {
        let bank = model
            .banks()
            .into_iter()
            .find(|b| b.layer == usage.layer)
            .ok_or_else(|| {
                Error::Checkpoint(format!("usage counts for unknown bank layer {}", usage.layer))
            })?;
        if usage.counts.len() != bank.entries {
            return Err(Error::Checkpoint(format!(
                "bank layer {} has {} counts, expected {}",
                usage.layer,
                usage.counts.len(),
                bank.entries
            )));
        }
        bank.restore_usage(usage.counts);
    }

    Ok(Loaded {
        model,
        store,
        iteration: manifest.iteration,
    })
}
