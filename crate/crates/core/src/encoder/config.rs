use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            layers: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens per image.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        check_common("vision", self.layers, self.width, self.heads, self.mlp_ratio)?;
        if self.channels == 0 {
            return Err(Error::Config("vision channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Causal self-attention mask in the text encoder.
    pub causal: bool,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: Tokenizer::standard_vocab_size(),
            context_length: 16,
            layers: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            causal: true,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        check_common("text", self.layers, self.width, self.heads, self.mlp_ratio)?;
        if self.vocab_size < Tokenizer::standard_vocab_size() {
            return Err(Error::Config(format!(
                "text vocab_size {} is smaller than the tokenizer vocabulary ({})",
                self.vocab_size,
                Tokenizer::standard_vocab_size()
            )));
        }
        if self.context_length < 3 {
            return Err(Error::Config("text context_length must be at least 3".into()));
        }
        Ok(())
    }
}

fn check_common(which: &str, layers: usize, width: usize, heads: usize, mlp_ratio: usize) -> Result<()> {
    if layers == 0 {
        return Err(Error::Config(format!("{which} encoder needs at least one layer")));
    }
    if heads == 0 || width == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{which} width {width} is not divisible by {heads} heads"
        )));
    }
    if mlp_ratio == 0 {
        return Err(Error::Config(format!("{which} mlp_ratio must be positive")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    /// Width of the joint embedding space.
    pub joint_dim: usize,
    /// Multiplier applied to cosine similarities before the softmax.
    pub logit_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vision: VisionConfig::default(),
            text: TextConfig::default(),
            joint_dim: 32,
            logit_scale: 100.0,
        }
    }
}

impl EncoderConfig {
    /// A two-layer, width-16 backbone for quick checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            vision: VisionConfig {
                image_size: 16,
                patch_size: 8,
                channels: 1,
                layers: 2,
                width: 16,
                heads: 2,
                mlp_ratio: 2,
            },
            text: TextConfig {
                context_length: 12,
                layers: 2,
                width: 16,
                heads: 2,
                mlp_ratio: 2,
                ..TextConfig::default()
            },
            joint_dim: 8,
            logit_scale: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.joint_dim == 0 {
            return Err(Error::Config("joint_dim must be positive".into()));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config(format!(
                "logit_scale must be positive and finite, got {}",
                self.logit_scale
            )));
        }
        Ok(())
    }
}
