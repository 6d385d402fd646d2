//! Composite layers built from graph primitives: linear maps, layer norm,
//! multi-head self-attention, feed-forward networks and pre-norm blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{AttentionLayout, Graph, Var};
use super::param::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Samples a tensor with i.i.d. `N(0, std²)` entries. Draws happen in `f64`
/// so both precisions see the same values up to rounding.
pub fn normal_tensor<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| S::of(dist.sample(rng))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        trainable: bool,
    ) -> Self {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), normal_tensor(rng, &[fan_in, fan_out], std), trainable),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out]), trainable),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<S> {
    pub gamma: Parameter<S>,
    pub beta: Parameter<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(name: &str, width: usize, trainable: bool) -> Self {
        LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[width], S::one()), trainable),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[width]), trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        g.layer_norm(x, gamma, beta, S::of(LAYER_NORM_EPS))
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Self-attention weights: a fused query/key/value projection `d → 3d` and an
/// output projection `d → d`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<S> {
    pub qkv: Linear<S>,
    pub out: Linear<S>,
    pub heads: usize,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        in_std: f64,
        out_std: f64,
        trainable: bool,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            qkv: Linear::init(rng, &format!("{name}.qkv"), width, 3 * width, in_std, trainable),
            out: Linear::init(rng, &format!("{name}.out"), width, width, out_std, trainable),
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.out.out_features()
    }

    /// Self-attention over `batch` stacked sequences of length `seq`.
    /// Returns the projected output and the attention node, whose recorded
    /// weights can be read with [`Graph::attention_probs`].
    pub fn forward(&self, g: &mut Graph<S>, x: Var, batch: usize, seq: usize, causal: bool) -> Result<(Var, Var)> {
        let width = g.value(x).width();
        if width != self.width() {
            return Err(Error::shape("multi_head_attention", g.value(x).shape(), &[self.width()]));
        }
        let qkv = self.qkv.forward(g, x)?;
        let attn = g.attention(
            qkv,
            AttentionLayout {
                batch,
                seq,
                heads: self.heads,
                causal,
            },
        )?;
        let y = self.out.forward(g, attn)?;
        Ok((y, attn))
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.qkv.params();
        p.extend(self.out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.qkv.params_mut();
        p.extend(self.out.params_mut());
        p
    }
}

/// `linear → GELU → linear`.
#[derive(Debug, Clone)]
pub struct FeedForward<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

impl<S: Scalar> FeedForward<S> {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        name: &str,
        width: usize,
        hidden: usize,
        fc1_std: f64,
        fc2_std: f64,
        trainable: bool,
    ) -> Self {
        FeedForward {
            fc1: Linear::init(rng, &format!("{name}.fc1"), width, hidden, fc1_std, trainable),
            fc2: Linear::init(rng, &format!("{name}.fc2"), hidden, width, fc2_std, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let width = g.value(x).width();
        if width != self.fc1.in_features() {
            return Err(Error::shape("feed_forward", g.value(x).shape(), &[self.fc1.in_features()]));
        }
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p
    }
}

/// Pre-norm Transformer block: `x + SA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<S> {
    pub ln1: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub ln2: LayerNorm<S>,
    pub ffn: FeedForward<S>,
}

/// Output of one block together with its attention node.
pub struct BlockOutput {
    pub hidden: Var,
    pub attention: Var,
}

impl<S: Scalar> TransformerBlock<S> {
    pub fn width(&self) -> usize {
        self.attn.width()
    }

    pub fn forward(&self, g: &mut Graph<S>, x: Var, batch: usize, seq: usize, causal: bool) -> Result<BlockOutput> {
        let width = g.value(x).width();
        if width != self.width() {
            return Err(Error::shape("transformer_block", g.value(x).shape(), &[self.width()]));
        }
        let h = self.ln1.forward(g, x)?;
        let (a, attention) = self.attn.forward(g, h, batch, seq, causal)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        let hidden = g.add(x, f)?;
        Ok(BlockOutput { hidden, attention })
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.ln1.params();
        p.extend(self.attn.params());
        p.extend(self.ln2.params());
        p.extend(self.ffn.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.ln1.params_mut();
        p.extend(self.attn.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.ffn.params_mut());
        p
    }
}
