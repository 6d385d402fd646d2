//! Prompt generators: the lightweight self-attention transform applied to
//! unified prompts, and the two-layer MLP used in the generator ablation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::autodiff::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Where layer normalization sits in the prompt transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransformNorm {
    /// `U′ = SA(U) + LN(U)`, `Û = FFN(LN(U′)) + LN(U′)`.
    #[default]
    ResidualBranch,
    /// `U′ = SA(LN(U)) + U`, `Û = FFN(LN(U′)) + U′`.
    PreNorm,
}

/// Trainable single Transformer layer over the unified prompt tokens.
#[derive(Debug, Clone)]
pub struct PromptTransformer<S> {
    pub ln_in: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub ln_mid: LayerNorm<S>,
    pub ffn: FeedForward<S>,
    pub norm: TransformNorm,
}

impl<S: Scalar> PromptTransformer<S> {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        norm: TransformNorm,
    ) -> Result<Self> {
        let attn_std = (width as f64).powf(-0.5);
        let proj_std = attn_std * 2f64.powf(-0.5);
        let fc_std = ((2 * width) as f64).powf(-0.5);
        Ok(PromptTransformer {
            ln_in: LayerNorm::new("theta.ln_in", width, true),
            attn: MultiHeadAttention::init(rng, "theta.attn", width, heads, attn_std, proj_std, true)?,
            ln_mid: LayerNorm::new("theta.ln_mid", width, true),
            ffn: FeedForward::init(rng, "theta.ffn", width, width * mlp_ratio, fc_std, proj_std, true),
            norm,
        })
    }

    pub fn width(&self) -> usize {
        self.attn.width()
    }

    /// Transforms one layer's prompts `[n × width]`, preserving shape.
    pub fn forward(&self, g: &mut Graph<S>, u: Var) -> Result<Var> {
        let shape = g.value(u).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.width() {
            return Err(Error::shape("upt_transform", &shape, &[0, self.width()]));
        }
        let n = shape[0];
        match self.norm {
            TransformNorm::ResidualBranch => {
                let (sa, _) = self.attn.forward(g, u, 1, n, false)?;
                let ln_u = self.ln_in.forward(g, u)?;
                let u_prime = g.add(sa, ln_u)?;
                let ln_up = self.ln_mid.forward(g, u_prime)?;
                let ff = self.ffn.forward(g, ln_up)?;
                g.add(ff, ln_up)
            }
            TransformNorm::PreNorm => {
                let ln_u = self.ln_in.forward(g, u)?;
                let (sa, _) = self.attn.forward(g, ln_u, 1, n, false)?;
                let u_prime = g.add(sa, u)?;
                let ln_up = self.ln_mid.forward(g, u_prime)?;
                let ff = self.ffn.forward(g, ln_up)?;
                g.add(ff, u_prime)
            }
        }
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.ln_in.params();
        p.extend(self.attn.params());
        p.extend(self.ln_mid.params());
        p.extend(self.ffn.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.ln_in.params_mut();
        p.extend(self.attn.params_mut());
        p.extend(self.ln_mid.params_mut());
        p.extend(self.ffn.params_mut());
        p
    }
}

/// Prompt generator of the MLP ablation: layer norm on the input rows, then
/// two affine layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct PromptMlp<S> {
    pub ln: LayerNorm<S>,
    pub ffn: FeedForward<S>,
}

impl<S: Scalar> PromptMlp<S> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, width: usize, hidden: usize) -> Self {
        PromptMlp {
            ln: LayerNorm::new("mlp.ln", width, true),
            ffn: FeedForward::init(
                rng,
                "mlp",
                width,
                hidden,
                (width as f64).powf(-0.5),
                (hidden as f64).powf(-0.5),
                true,
            ),
        }
    }

    pub fn width(&self) -> usize {
        self.ffn.fc1.in_features()
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.ln.params();
        p.extend(self.ffn.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.ln.params_mut();
        p.extend(self.ffn.params_mut());
        p
    }
}

/// Generates prompts row-wise with `mlp`, preserving shape.
pub fn mlp_generate<S: Scalar>(g: &mut Graph<S>, u: Var, mlp: &PromptMlp<S>) -> Result<Var> {
    let shape = g.value(u).shape().to_vec();
    if shape.len() != 2 || shape[1] != mlp.width() {
        return Err(Error::shape("mlp_generate", &shape, &[0, mlp.width()]));
    }
    let x = mlp.ln.forward(g, u)?;
    mlp.ffn.forward(g, x)
}

/// Splits transformed prompts by rows: the first `split_index` rows go to
/// the text encoder, the rest to the image encoder.
pub fn split_unified<S: Scalar>(g: &mut Graph<S>, u_hat: Var, split_index: usize) -> Result<(Var, Var)> {
    let n = g.value(u_hat).rows();
    if split_index == 0 || split_index >= n {
        return Err(Error::Config(format!(
            "split index {split_index} must lie in 1..={} for {n} unified prompts",
            n.saturating_sub(1)
        )));
    }
    let text = g.slice_rows(u_hat, 0, split_index)?;
    let visual = g.slice_rows(u_hat, split_index, n)?;
    Ok((text, visual))
}

/// Maps unified-width prompts to an encoder's width. Identity when the
/// widths already agree.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum OutputProjection<S> {
    Identity,
    Linear(Linear<S>),
}

impl<S: Scalar> OutputProjection<S> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, name: &str, from: usize, to: usize) -> Self {
        if from == to {
            OutputProjection::Identity
        } else {
            OutputProjection::Linear(Linear::init(rng, name, from, to, (from as f64).powf(-0.5), true))
        }
    }

    pub fn forward(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        match self {
            OutputProjection::Identity => Ok(x),
            OutputProjection::Linear(l) => l.forward(g, x),
        }
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        match self {
            OutputProjection::Identity => Vec::new(),
            OutputProjection::Linear(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        match self {
            OutputProjection::Identity => Vec::new(),
            OutputProjection::Linear(l) => l.params_mut(),
        }
    }
}
