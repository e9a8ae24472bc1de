use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MoEClassifier;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON container. Holds the model config, each router's
/// config and variant, and every parameter with its name, role and shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: MoEClassifier,
}

pub fn save_checkpoint(path: &Path, model: &MoEClassifier) -> Result<()> {
    let ck = Checkpoint { format_version: CHECKPOINT_VERSION, model: model.clone() };
    fs::write(path, serde_json::to_vec(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MoEClassifier> {
    let raw = fs::read(path)?;
    let value: serde_json::Value = serde_json::from_slice(&raw)?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => return Err(Error::Checkpoint(format!("unsupported format version {v}"))),
        None => return Err(Error::Checkpoint("missing format_version".into())),
    }
    let ck: Checkpoint = serde_json::from_value(value)?;
    ck.model.validate()?;
    Ok(ck.model)
}
