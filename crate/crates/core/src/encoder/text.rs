//! Token-embedding Transformer text encoder with EOS readout.

use rand::Rng;

use crate::autodiff::nn::{normal_tensor, LayerNorm, TransformerBlock};
use crate::autodiff::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::config::TextConfig;
use super::init_block;
use super::tokenizer::EOS;

/// One position of a text input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(u32),
    /// Row `j` of the layer's text prompt.
    Prompt(usize),
}

pub type TextSequence = Vec<Slot>;

/// Per-layer text prompt rows, each `[len × width]`. Layer 0 feeds the
/// prompt slots of the embedding sequence; a prompt at a later layer
/// overwrites the hidden states at the prompt slots.
#[derive(Debug, Clone)]
pub struct TextPrompts {
    pub len: usize,
    pub layers: Vec<Option<Var>>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder<S> {
    pub(crate) cfg: TextConfig,
    pub(crate) token_embedding: Parameter<S>,
    pub(crate) positional: Parameter<S>,
    pub(crate) blocks: Vec<TransformerBlock<S>>,
    pub(crate) ln_final: LayerNorm<S>,
    pub(crate) proj: Parameter<S>,
}

impl<S: Scalar> TextEncoder<S> {
    pub(crate) fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &TextConfig, joint_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let token_embedding = Parameter::frozen("text.token_embedding", normal_tensor(rng, &[cfg.vocab_size, w], 0.02));
        let positional = Parameter::frozen("text.positional", normal_tensor(rng, &[cfg.context_length, w], 0.01));
        let blocks = (0..cfg.layers)
            .map(|i| init_block(rng, &format!("text.blocks.{i}"), w, cfg.heads, cfg.mlp_ratio, cfg.layers))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new("text.ln_final", w, false);
        let proj = Parameter::frozen("text.proj", normal_tensor(rng, &[w, joint_dim], (w as f64).powf(-0.5)));
        Ok(TextEncoder {
            cfg: cfg.clone(),
            token_embedding,
            positional,
            blocks,
            ln_final,
            proj,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    pub fn token_embedding(&self) -> &Parameter<S> {
        &self.token_embedding
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = vec![&self.token_embedding, &self.positional];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.ln_final.params());
        p.push(&self.proj);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = vec![&mut self.token_embedding, &mut self.positional];
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.ln_final.params_mut());
        p.push(&mut self.proj);
        p
    }

    fn check(&self, g: &Graph<S>, sequences: &[TextSequence], prompts: Option<&TextPrompts>) -> Result<()> {
        if sequences.is_empty() {
            return Err(Error::Data("no text sequences to encode".into()));
        }
        let ctx = self.cfg.context_length;
        let uses_prompt = sequences.iter().flatten().any(|s| matches!(s, Slot::Prompt(_)));
        for seq in sequences {
            if seq.len() != ctx {
                return Err(Error::Length(format!(
                    "text sequence has {} positions, context length is {ctx}",
                    seq.len()
                )));
            }
            if !seq.contains(&Slot::Token(EOS)) {
                return Err(Error::Data("text sequence has no EOS token".into()));
            }
            for s in seq {
                if let Slot::Token(id) = s {
                    if *id as usize >= self.cfg.vocab_size {
                        return Err(Error::Index(format!("token id {id} outside vocabulary")));
                    }
                }
            }
        }
        match prompts {
            None if uses_prompt => Err(Error::Config("sequence has prompt slots but no text prompts were given".into())),
            None => Ok(()),
            Some(p) => {
                if p.layers.len() != self.cfg.layers {
                    return Err(Error::Config(format!(
                        "text prompt plan covers {} layers, encoder has {}",
                        p.layers.len(),
                        self.cfg.layers
                    )));
                }
                if p.layers[0].is_none() {
                    return Err(Error::Config("text prompts must be present at layer 0".into()));
                }
                for v in p.layers.iter().flatten() {
                    let shape = g.value(*v).shape();
                    if shape != [p.len, self.cfg.width] {
                        return Err(Error::shape("apply_text_prompt", shape, &[p.len, self.cfg.width]));
                    }
                }
                for s in sequences.iter().flatten() {
                    if let Slot::Prompt(j) = s {
                        if *j >= p.len {
                            return Err(Error::Index(format!("prompt slot {j} beyond prompt length {}", p.len)));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Token and layer-0 prompt embeddings of every position,
    /// `[sequences·context × width]`, before positional embeddings.
    pub fn embed_tokens(&self, g: &mut Graph<S>, sequences: &[TextSequence], prompts: Option<&TextPrompts>) -> Result<Var> {
        self.check(g, sequences, prompts)?;
        let emb = g.param(&self.token_embedding);
        let mut sources = vec![emb];
        if let Some(v) = prompts.and_then(|p| p.layers[0]) {
            sources.push(v);
        }
        let index: Vec<_> = sequences
            .iter()
            .flatten()
            .map(|s| match *s {
                Slot::Token(id) => (0, id as usize),
                Slot::Prompt(j) => (1, j),
            })
            .collect();
        g.gather_rows(&sources, &index)
    }

    /// Unit-norm class embeddings, `[sequences × joint_dim]`.
    pub fn forward(&self, g: &mut Graph<S>, sequences: &[TextSequence], prompts: Option<&TextPrompts>) -> Result<Var> {
        let tokens = self.embed_tokens(g, sequences, prompts)?;
        let ctx = self.cfg.context_length;
        let batch = sequences.len();
        let pos = g.param(&self.positional);
        let pos_index: Vec<_> = (0..batch).flat_map(|_| (0..ctx).map(|r| (0, r))).collect();
        let pos = g.gather_rows(&[pos], &pos_index)?;
        let mut x = g.add(tokens, pos)?;

        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                if let Some(v) = prompts.and_then(|p| p.layers[i]) {
                    let index: Vec<_> = sequences
                        .iter()
                        .enumerate()
                        .flat_map(|(b, seq)| {
                            seq.iter().enumerate().map(move |(t, s)| match *s {
                                Slot::Prompt(j) => (1, j),
                                Slot::Token(_) => (0, b * ctx + t),
                            })
                        })
                        .collect();
                    x = g.gather_rows(&[x, v], &index)?;
                }
            }
            x = block.forward(g, x, batch, ctx, self.cfg.causal)?.hidden;
        }

        let eos: Vec<_> = sequences
            .iter()
            .enumerate()
            .map(|(b, seq)| {
                let t = seq.iter().position(|s| *s == Slot::Token(EOS)).expect("checked above");
                (0, b * ctx + t)
            })
            .collect();
        let h = g.gather_rows(&[x], &eos)?;
        let h = self.ln_final.forward(g, h)?;
        let proj = g.param(&self.proj);
        let feat = g.matmul(h, proj)?;
        g.l2_normalize(feat)
    }
}
