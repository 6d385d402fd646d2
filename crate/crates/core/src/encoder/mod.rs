//! Frozen miniature CLIP-style dual encoder and the cosine-similarity classifier.

mod checkpoint;
pub mod config;
pub mod text;
pub mod tokenizer;
pub mod vision;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::nn::{FeedForward, LayerNorm, MultiHeadAttention, TransformerBlock};
use crate::autodiff::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use config::{EncoderConfig, TextConfig, VisionConfig};
pub use text::{Slot, TextEncoder, TextPrompts, TextSequence};
pub use tokenizer::Tokenizer;
pub use vision::{VisionEncoder, VisionOutput, VisualPrompts};

/// CLIP-style scaled initialization of one pre-norm block.
pub(crate) fn init_block<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    name: &str,
    width: usize,
    heads: usize,
    mlp_ratio: usize,
    layers: usize,
) -> Result<TransformerBlock<S>> {
    let attn_std = (width as f64).powf(-0.5);
    let proj_std = attn_std * ((2 * layers) as f64).powf(-0.5);
    let fc_std = ((2 * width) as f64).powf(-0.5);
    Ok(TransformerBlock {
        ln1: LayerNorm::new(&format!("{name}.ln1"), width, false),
        attn: MultiHeadAttention::init(rng, &format!("{name}.attn"), width, heads, attn_std, proj_std, false)?,
        ln2: LayerNorm::new(&format!("{name}.ln2"), width, false),
        ffn: FeedForward::init(rng, &format!("{name}.ffn"), width, width * mlp_ratio, fc_std, proj_std, false),
    })
}

#[derive(Debug, Clone)]
pub struct DualEncoder<S> {
    config: EncoderConfig,
    vision: VisionEncoder<S>,
    text: TextEncoder<S>,
    tokenizer: Tokenizer,
}

impl<S: Scalar> DualEncoder<S> {
    /// Deterministic random backbone; every parameter is frozen.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vision = VisionEncoder::init(&mut rng, &config.vision, config.joint_dim)?;
        let text = TextEncoder::init(&mut rng, &config.text, config.joint_dim)?;
        Ok(DualEncoder {
            config: config.clone(),
            vision,
            text,
            tokenizer: Tokenizer::standard(config.text.context_length),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vision(&self) -> &VisionEncoder<S> {
        &self.vision
    }

    pub fn text(&self) -> &TextEncoder<S> {
        &self.text
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn logit_scale(&self) -> f64 {
        self.config.logit_scale
    }

    pub fn set_logit_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("logit_scale must be positive, got {scale}")));
        }
        self.config.logit_scale = scale;
        Ok(())
    }

    pub fn joint_dim(&self) -> usize {
        self.config.joint_dim
    }

    /// All backbone parameters in a fixed order.
    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.vision.params();
        p.extend(self.text.params());
        p
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.vision.params_mut();
        p.extend(self.text.params_mut());
        p
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// SHA-256 over every backbone parameter's name, shape and stored bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in self.params() {
            h.update(p.name().as_bytes());
            for &e in p.value().shape() {
                h.update((e as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.value().data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn cast<T: Scalar>(&self) -> DualEncoder<T> {
        fn cast_block<S: Scalar, T: Scalar>(b: &TransformerBlock<S>) -> TransformerBlock<T> {
            let lin = |l: &crate::autodiff::nn::Linear<S>| crate::autodiff::nn::Linear {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            };
            let ln = |l: &LayerNorm<S>| LayerNorm {
                gamma: l.gamma.cast(),
                beta: l.beta.cast(),
            };
            TransformerBlock {
                ln1: ln(&b.ln1),
                attn: MultiHeadAttention {
                    qkv: lin(&b.attn.qkv),
                    out: lin(&b.attn.out),
                    heads: b.attn.heads,
                },
                ln2: ln(&b.ln2),
                ffn: FeedForward {
                    fc1: lin(&b.ffn.fc1),
                    fc2: lin(&b.ffn.fc2),
                },
            }
        }
        let v = &self.vision;
        let t = &self.text;
        DualEncoder {
            config: self.config.clone(),
            vision: VisionEncoder {
                cfg: v.cfg.clone(),
                patch_proj: crate::autodiff::nn::Linear {
                    weight: v.patch_proj.weight.cast(),
                    bias: v.patch_proj.bias.cast(),
                },
                class_token: v.class_token.cast(),
                positional: v.positional.cast(),
                blocks: v.blocks.iter().map(cast_block).collect(),
                ln_post: LayerNorm {
                    gamma: v.ln_post.gamma.cast(),
                    beta: v.ln_post.beta.cast(),
                },
                proj: v.proj.cast(),
            },
            text: TextEncoder {
                cfg: t.cfg.clone(),
                token_embedding: t.token_embedding.cast(),
                positional: t.positional.cast(),
                blocks: t.blocks.iter().map(cast_block).collect(),
                ln_final: LayerNorm {
                    gamma: t.ln_final.gamma.cast(),
                    beta: t.ln_final.beta.cast(),
                },
                proj: t.proj.cast(),
            },
            tokenizer: self.tokenizer.clone(),
        }
    }

    /// Token sequences for class names. Without a prompt length the
    /// hand-crafted template is used; with `Some(m)` the template words are
    /// replaced by `m` prompt slots.
    pub fn class_sequences(&self, class_names: &[String], prompt_len: Option<usize>) -> Result<Vec<TextSequence>> {
        if class_names.is_empty() {
            return Err(Error::Data("class list is empty".into()));
        }
        let ctx = self.config.text.context_length;
        class_names
            .iter()
            .map(|name| match prompt_len {
                None => Ok(self
                    .tokenizer
                    .tokenize(&tokenizer::template_for(name))?
                    .into_iter()
                    .map(Slot::Token)
                    .collect()),
                Some(m) => {
                    let words = self.tokenizer.word_ids(name)?;
                    if m + words.len() + 2 > ctx {
                        return Err(Error::Length(format!(
                            "{m} prompt tokens + {} class tokens + 2 sentinels exceed context length {ctx}",
                            words.len()
                        )));
                    }
                    let mut seq = Vec::with_capacity(ctx);
                    seq.push(Slot::Token(tokenizer::BOS));
                    seq.extend((0..m).map(Slot::Prompt));
                    seq.extend(words.into_iter().map(Slot::Token));
                    seq.push(Slot::Token(tokenizer::EOS));
                    seq.resize(ctx, Slot::Token(tokenizer::PAD));
                    Ok(seq)
                }
            })
            .collect()
    }

    /// Class embeddings `[k × joint_dim]` (rows are the classifier columns).
    pub fn encode_text(&self, g: &mut Graph<S>, class_names: &[String], prompts: Option<&TextPrompts>) -> Result<Var> {
        let seqs = self.class_sequences(class_names, prompts.map(|p| p.len))?;
        self.text.forward(g, &seqs, prompts)
    }

    /// Image features `[batch × joint_dim]`.
    pub fn encode_images(&self, g: &mut Graph<S>, images: &[Tensor<S>], prompts: Option<&VisualPrompts>) -> Result<Var> {
        Ok(self.vision.forward(g, images, prompts)?.features)
    }

    /// `logit_scale · z Wᵀ`, with class embeddings as rows of `w`.
    pub fn logits(&self, g: &mut Graph<S>, z: Var, w: Var) -> Result<Var> {
        if g.value(z).width() != g.value(w).width() {
            return Err(Error::shape("cosine_classify", g.value(z).shape(), g.value(w).shape()));
        }
        let wt = g.transpose(w)?;
        let cos = g.matmul(z, wt)?;
        Ok(g.scale(cos, S::of(self.config.logit_scale)))
    }

    /// The zero-shot classifier built from the hand-crafted template.
    pub fn zero_shot_classifier(&self, class_names: &[String]) -> Result<ClassifierMatrix<S>> {
        let mut g = Graph::new();
        let w = self.encode_text(&mut g, class_names, None)?;
        ClassifierMatrix::from_rows(g.value(w), class_names.to_vec())
    }

    /// Image features without prompts, outside any training graph.
    pub fn image_features(&self, images: &[Tensor<S>]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let z = self.encode_images(&mut g, images, None)?;
        Ok(g.value(z).clone())
    }
}

/// Classifier weights `W` as a `[d × k]` matrix with unit-norm columns.
#[derive(Debug, Clone)]
pub struct ClassifierMatrix<S> {
    weights: Tensor<S>,
    class_names: Vec<String>,
}

impl<S: Scalar> ClassifierMatrix<S> {
    pub fn new(weights: Tensor<S>, class_names: Vec<String>) -> Result<Self> {
        if weights.rank() != 2 || weights.shape()[1] != class_names.len() {
            return Err(Error::shape("classifier", weights.shape(), &[0, class_names.len()]));
        }
        let (d, k) = (weights.shape()[0], weights.shape()[1]);
        for c in 0..k {
            let norm: f64 = (0..d).map(|r| weights.at(r, c).as_f64().powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!("classifier column {c} has norm {norm}")));
            }
        }
        Ok(ClassifierMatrix { weights, class_names })
    }

    /// From class embeddings stored as rows `[k × d]`.
    pub fn from_rows(rows: &Tensor<S>, class_names: Vec<String>) -> Result<Self> {
        Self::new(rows.transpose()?, class_names)
    }

    pub fn weights(&self) -> &Tensor<S> {
        &self.weights
    }

    /// Class embeddings as rows `[k × d]`.
    pub fn rows(&self) -> Tensor<S> {
        self.weights.transpose().expect("rank 2")
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn column(&self, c: usize) -> Vec<S> {
        (0..self.dim()).map(|r| self.weights.at(r, c)).collect()
    }
}

/// Class probabilities `softmax(logit_scale · Wᵀ z)` for one feature vector.
pub fn cosine_classify<S: Scalar>(z: &Tensor<S>, w: &ClassifierMatrix<S>, logit_scale: f64) -> Result<Tensor<S>> {
    if z.len() != w.dim() {
        return Err(Error::shape("cosine_classify", z.shape(), w.weights().shape()));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.reshape(&[1, z.len()])?);
    let wv = g.constant(w.weights().clone());
    let cos = g.matmul(zv, wv)?;
    let logits = g.scale(cos, S::of(logit_scale));
    let p = g.softmax(logits);
    g.value(p).reshape(&[w.num_classes()])
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub use checkpoint::{load_backbone, save_backbone};
