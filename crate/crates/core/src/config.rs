//! Experiment configuration files.
//!
//! Every field has a default, so a config file may list only what it
//! changes. The resolved configuration, defaults included, is what gets
//! written next to experiment outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::shift::ShiftSpec;
use crate::data::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::{validate_shots, MatrixSpec, TrainConfig};
use crate::prompts::{StrategyConfig, StrategyKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DatasetRef {
    /// Existing dataset manifest or its directory. When absent the
    /// synthetic spec below is generated into `<output_dir>/data`.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub precision: Precision,
    pub threads: usize,
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    /// Saved backbone directory; a fresh backbone is drawn from `seed` otherwise.
    pub backbone: Option<PathBuf>,
    pub dataset: DatasetRef,
    pub strategy: StrategyKind,
    pub strategy_config: StrategyConfig,
    pub train: TrainConfig,
    pub shots: usize,
    pub matrix: MatrixSpec,
    pub shifts: Vec<ShiftSpec>,
    /// Image-encoder block for attention maps; the last block when absent.
    pub attention_layer: Option<usize>,
    /// Test images to map.
    pub attention_images: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            precision: Precision::F32,
            threads: 1,
            output_dir: PathBuf::from("runs"),
            encoder: EncoderConfig::default(),
            backbone: None,
            dataset: DatasetRef::default(),
            strategy: StrategyKind::Unified,
            strategy_config: StrategyConfig::default(),
            train: TrainConfig::default(),
            shots: 16,
            matrix: MatrixSpec::default(),
            shifts: vec![
                ShiftSpec::noise("noise-0.5", 0.5, 101),
                ShiftSpec::noise("noise-1.0", 1.0, 102),
                ShiftSpec::prototype("prototype-0.5", 0.5, 103),
            ],
            attention_layer: None,
            attention_images: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.matrix.validate()?;
        self.dataset.synthetic.validate()?;
        validate_shots(self.shots)?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        for (what, path) in [("dataset", &self.dataset.path), ("backbone", &self.backbone)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("{what} path {} does not exist", p.display())));
                }
            }
        }
        if let Some(l) = self.attention_layer {
            if l >= self.encoder.vision.layers {
                return Err(Error::Config(format!(
                    "attention_layer {l} outside 0..{}",
                    self.encoder.vision.layers
                )));
            }
        }
        Ok(())
    }
}
