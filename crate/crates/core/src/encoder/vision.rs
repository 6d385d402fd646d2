//! Patch-embedding ViT image encoder.

use rand::Rng;

use crate::autodiff::nn::{normal_tensor, LayerNorm, Linear, TransformerBlock};
use crate::autodiff::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::config::VisionConfig;
use super::init_block;

/// Per-layer visual prompt tokens, each `[len × width]`.
///
/// A prompt at layer 0 is inserted between the class token and the patch
/// tokens. A prompt at a later layer overwrites the prompt positions coming
/// out of the previous layer; a layer without a prompt carries them forward.
#[derive(Debug, Clone)]
pub struct VisualPrompts {
    pub len: usize,
    pub layers: Vec<Option<Var>>,
}

/// Nodes recorded during an image forward pass.
pub struct VisionOutput {
    /// Unit-norm joint-space features, `[batch × joint_dim]`.
    pub features: Var,
    /// Input token matrix of every block, `[batch·seq × width]`.
    pub layer_inputs: Vec<Var>,
    /// Attention node of every block.
    pub attention: Vec<Var>,
    pub prompt_len: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder<S> {
    pub(crate) cfg: VisionConfig,
    pub(crate) patch_proj: Linear<S>,
    pub(crate) class_token: Parameter<S>,
    pub(crate) positional: Parameter<S>,
    pub(crate) blocks: Vec<TransformerBlock<S>>,
    pub(crate) ln_post: LayerNorm<S>,
    pub(crate) proj: Parameter<S>,
}

impl<S: Scalar> VisionEncoder<S> {
    pub(crate) fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &VisionConfig, joint_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let scale = (w as f64).powf(-0.5);
        let patch_proj = Linear::init(
            rng,
            "visual.patch_proj",
            cfg.patch_dim(),
            w,
            (cfg.patch_dim() as f64).powf(-0.5),
            false,
        );
        let class_token = Parameter::frozen("visual.class_token", normal_tensor(rng, &[1, w], scale));
        let positional = Parameter::frozen(
            "visual.positional",
            normal_tensor(rng, &[1 + cfg.num_patches(), w], scale),
        );
        let blocks = (0..cfg.layers)
            .map(|i| init_block(rng, &format!("visual.blocks.{i}"), w, cfg.heads, cfg.mlp_ratio, cfg.layers))
            .collect::<Result<Vec<_>>>()?;
        let ln_post = LayerNorm::new("visual.ln_post", w, false);
        let proj = Parameter::frozen("visual.proj", normal_tensor(rng, &[w, joint_dim], scale));
        Ok(VisionEncoder {
            cfg: cfg.clone(),
            patch_proj,
            class_token,
            positional,
            blocks,
            ln_post,
            proj,
        })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.patch_proj.params();
        p.push(&self.class_token);
        p.push(&self.positional);
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.ln_post.params());
        p.push(&self.proj);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.patch_proj.params_mut();
        p.push(&mut self.class_token);
        p.push(&mut self.positional);
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.ln_post.params_mut());
        p.push(&mut self.proj);
        p
    }

    pub fn blocks(&self) -> &[TransformerBlock<S>] {
        &self.blocks
    }

    fn check_image(&self, img: &Tensor<S>) -> Result<()> {
        let c = &self.cfg;
        let expected = [c.image_size, c.image_size, c.channels];
        if img.shape() != expected {
            return Err(Error::shape("patch_embed", img.shape(), &expected));
        }
        Ok(())
    }

    /// Flattens non-overlapping patches: row `b·s + gy·grid + gx`, columns in
    /// `(py, px, channel)` order.
    pub fn patchify(&self, images: &[Tensor<S>]) -> Result<Tensor<S>> {
        let c = &self.cfg;
        let (p, grid, ch, size) = (c.patch_size, c.grid(), c.channels, c.image_size);
        let s = c.num_patches();
        let pd = c.patch_dim();
        let mut out = vec![S::zero(); images.len() * s * pd];
        for (b, img) in images.iter().enumerate() {
            self.check_image(img)?;
            let px = img.data();
            for gy in 0..grid {
                for gx in 0..grid {
                    let row = b * s + gy * grid + gx;
                    let mut col = 0;
                    for py in 0..p {
                        let y = gy * p + py;
                        let start = (y * size + gx * p) * ch;
                        out[row * pd + col..row * pd + col + p * ch].copy_from_slice(&px[start..start + p * ch]);
                        col += p * ch;
                    }
                }
            }
        }
        Tensor::new(vec![images.len() * s, pd], out)
    }

    /// `[c; Z] + positional` for each image, stacked: `[batch·(1+s) × width]`.
    pub fn patch_embed(&self, g: &mut Graph<S>, images: &[Tensor<S>]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Data("no images to encode".into()));
        }
        let patches = g.constant(self.patchify(images)?);
        let z = self.patch_proj.forward(g, patches)?;
        let cls = g.param(&self.class_token);
        let pos = g.param(&self.positional);
        let s = self.cfg.num_patches();
        let mut index = Vec::with_capacity(images.len() * (1 + s));
        let mut pos_index = Vec::with_capacity(images.len() * (1 + s));
        for b in 0..images.len() {
            index.push((0, 0));
            index.extend((0..s).map(|j| (1, b * s + j)));
            pos_index.extend((0..=s).map(|r| (0, r)));
        }
        let tokens = g.gather_rows(&[cls, z], &index)?;
        let pos = g.gather_rows(&[pos], &pos_index)?;
        g.add(tokens, pos)
    }

    fn check_prompts(&self, g: &Graph<S>, prompts: &VisualPrompts) -> Result<()> {
        if prompts.layers.len() != self.cfg.layers {
            return Err(Error::Config(format!(
                "visual prompt plan covers {} layers, encoder has {}",
                prompts.layers.len(),
                self.cfg.layers
            )));
        }
        if prompts.len == 0 {
            return Ok(());
        }
        if prompts.layers[0].is_none() {
            return Err(Error::Config("visual prompts must be inserted at layer 0".into()));
        }
        for v in prompts.layers.iter().flatten() {
            let shape = g.value(*v).shape();
            if shape != [prompts.len, self.cfg.width] {
                return Err(Error::shape("insert_visual_prompts", shape, &[prompts.len, self.cfg.width]));
            }
        }
        Ok(())
    }

    /// Image features, optionally with visual prompts.
    pub fn forward(&self, g: &mut Graph<S>, images: &[Tensor<S>], prompts: Option<&VisualPrompts>) -> Result<VisionOutput> {
        if let Some(p) = prompts {
            self.check_prompts(g, p)?;
        }
        let n = prompts.map_or(0, |p| p.len);
        let s = self.cfg.num_patches();
        let batch = images.len();
        let mut x = self.patch_embed(g, images)?;
        let mut seq = 1 + s;
        let mut layer_inputs = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            if n > 0 {
                if let Some(v) = prompts.and_then(|p| p.layers[i]) {
                    x = insert_prompts(g, x, v, batch, seq, s, n, i == 0)?;
                    seq = 1 + n + s;
                }
            }
            layer_inputs.push(x);
            let out = block.forward(g, x, batch, seq, false)?;
            attention.push(out.attention);
            x = out.hidden;
        }
        let cls_index: Vec<_> = (0..batch).map(|b| (0, b * seq)).collect();
        let cls = g.gather_rows(&[x], &cls_index)?;
        let cls = self.ln_post.forward(g, cls)?;
        let proj = g.param(&self.proj);
        let feat = g.matmul(cls, proj)?;
        let features = g.l2_normalize(feat)?;
        Ok(VisionOutput {
            features,
            layer_inputs,
            attention,
            prompt_len: n,
            seq_len: seq,
        })
    }
}

/// Builds `[c; V; Z]` per sequence. With `fresh`, `x` holds `[c; Z]` rows;
/// otherwise `x` holds `[c; V_prev; Z]` and the previous prompt rows are dropped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn insert_prompts<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    v: Var,
    batch: usize,
    seq: usize,
    patches: usize,
    n: usize,
    fresh: bool,
) -> Result<Var> {
    let skip = if fresh { 1 } else { 1 + n };
    let mut index = Vec::with_capacity(batch * (1 + n + patches));
    for b in 0..batch {
        index.push((0, b * seq));
        index.extend((0..n).map(|j| (1, j)));
        index.extend((0..patches).map(|t| (0, b * seq + skip + t)));
    }
    g.gather_rows(&[x, v], &index)
}
