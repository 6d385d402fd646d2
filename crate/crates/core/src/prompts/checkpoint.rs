//! Prompt checkpoints: `strategy.json` plus one PFTENSOR file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PromptStrategy, StrategyConfig, StrategyKind};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::pftensor;
use crate::tensor::Scalar;

pub const DESCRIPTOR_FILE: &str = "strategy.json";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    schema_version: u32,
    kind: StrategyKind,
    config: StrategyConfig,
    precision: String,
    backbone_checksum: String,
    params: Vec<Entry>,
}

pub fn save_strategy<S: Scalar>(strategy: &PromptStrategy<S>, encoder: &DualEncoder<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for p in strategy.trainables() {
        let file = format!("{}.pft", p.name());
        pftensor::save(&dir.join(&file), p.value())?;
        params.push(Entry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            file,
        });
    }
    let desc = Descriptor {
        schema_version: SCHEMA_VERSION,
        kind: strategy.kind(),
        config: strategy.config().clone(),
        precision: S::NAME.to_string(),
        backbone_checksum: encoder.checksum(),
        params,
    };
    let path = dir.join(DESCRIPTOR_FILE);
    let json = serde_json::to_string_pretty(&desc).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Restores a strategy trained against `encoder`. The stored backbone
/// checksum must match when both sides share a precision.
pub fn load_strategy<S: Scalar>(dir: &Path, encoder: &DualEncoder<S>) -> Result<PromptStrategy<S>> {
    let path = dir.join(DESCRIPTOR_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let desc: Descriptor = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if desc.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!("unsupported strategy schema version {}", desc.schema_version)));
    }
    let mut values = Vec::with_capacity(desc.params.len());
    for entry in desc.params {
        let t = pftensor::load_any::<S>(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Data(format!("shape mismatch for {}", entry.name)));
        }
        values.push((entry.name, t));
    }
    let precision = desc.precision.clone();
    let s = PromptStrategy::from_parts(desc.kind, desc.config, encoder, values)?;
    if precision == S::NAME && encoder.checksum() != desc.backbone_checksum {
        return Err(Error::Integrity(format!(
            "prompts in {} were trained against a different backbone",
            dir.display()
        )));
    }
    Ok(s)
}
