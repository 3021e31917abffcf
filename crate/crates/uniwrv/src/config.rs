//! Run configuration: one TOML file with `[model]`, `[data]`, `[train]`,
//! and `[flags]` sections. Unknown keys are rejected; omitted keys take the
//! desk-scale defaults. Every command writes the fully resolved config next
//! to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::weathergen::DatasetConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    /// Gumbel-softmax hard path routing (soft routing is the default).
    pub hard_routing: bool,
    /// Train with 64-bit op outputs instead of 32-bit.
    pub grad_mode_64bit: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub flags: Flags,
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Write the resolved configuration verbatim next to a command's outputs.
pub fn write_resolved(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("config.resolved.toml");
    let text =
        toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("serialize: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
