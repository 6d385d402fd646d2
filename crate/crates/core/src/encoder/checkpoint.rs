//! Backbone checkpoints: a directory of PFTENSOR files plus `header.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DualEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::pftensor;
use crate::tensor::Scalar;

pub const HEADER_FILE: &str = "header.json";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: EncoderConfig,
    logit_scale: f64,
    precision: String,
    checksum: String,
    params: Vec<ParamEntry>,
}

pub fn save_backbone<S: Scalar>(encoder: &DualEncoder<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for p in encoder.params() {
        let file = format!("{}.pft", p.name());
        pftensor::save(&dir.join(&file), p.value())?;
        params.push(ParamEntry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            file,
        });
    }
    let header = Header {
        schema_version: SCHEMA_VERSION,
        config: encoder.config().clone(),
        logit_scale: encoder.logit_scale(),
        precision: S::NAME.to_string(),
        checksum: encoder.checksum(),
        params,
    };
    let path = dir.join(HEADER_FILE);
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint in either stored precision.
pub fn load_backbone<S: Scalar>(dir: &Path) -> Result<DualEncoder<S>> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint schema version {}",
            header.schema_version
        )));
    }
    let mut config = header.config.clone();
    config.logit_scale = header.logit_scale;
    let mut encoder = DualEncoder::<S>::init(&config, 0)?;
    {
        let mut params = encoder.params_mut();
        if params.len() != header.params.len() {
            return Err(Error::Data(format!(
                "checkpoint lists {} parameters, architecture has {}",
                header.params.len(),
                params.len()
            )));
        }
        for (p, entry) in params.iter_mut().zip(&header.params) {
            if p.name() != entry.name {
                return Err(Error::Data(format!(
                    "checkpoint parameter {} does not match expected {}",
                    entry.name,
                    p.name()
                )));
            }
            let t = pftensor::load_any::<S>(&dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Data(format!("shape mismatch for {}", entry.name)));
            }
            p.set_value(t)?;
        }
    }
    if header.precision == S::NAME && encoder.checksum() != header.checksum {
        return Err(Error::Integrity(format!("backbone checksum mismatch in {}", dir.display())));
    }
    Ok(encoder)
}
