//! Prompt-tuning strategies. Each strategy owns its trainable parameters and
//! turns them into per-layer prompt plans for the two encoders.

mod checkpoint;
pub mod transform;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::normal_tensor;
use crate::autodiff::{Graph, Parameter, Var};
use crate::encoder::{tokenizer, DualEncoder, TextPrompts, VisualPrompts};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_strategy, save_strategy};
pub use transform::{mlp_generate, split_unified, OutputProjection, PromptMlp, PromptTransformer, TransformNorm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    /// Learnable context vectors in front of the class tokens (CoOp).
    TextOnly,
    VptShallow,
    VptDeep,
    /// Independent text and deep visual prompts trained together.
    Joint,
    /// One prompt set fed verbatim to both encoders.
    Shared,
    /// Unified prompts generated by a two-layer MLP.
    Mlp,
    /// Unified prompts transformed by a lightweight self-attention layer.
    Unified,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::ZeroShot,
        StrategyKind::TextOnly,
        StrategyKind::VptShallow,
        StrategyKind::VptDeep,
        StrategyKind::Joint,
        StrategyKind::Shared,
        StrategyKind::Mlp,
        StrategyKind::Unified,
    ];

    pub const TRAINABLE: [StrategyKind; 7] = [
        StrategyKind::TextOnly,
        StrategyKind::VptShallow,
        StrategyKind::VptDeep,
        StrategyKind::Joint,
        StrategyKind::Shared,
        StrategyKind::Mlp,
        StrategyKind::Unified,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "zero_shot",
            StrategyKind::TextOnly => "text_only",
            StrategyKind::VptShallow => "vpt_shallow",
            StrategyKind::VptDeep => "vpt_deep",
            StrategyKind::Joint => "joint",
            StrategyKind::Shared => "shared",
            StrategyKind::Mlp => "mlp",
            StrategyKind::Unified => "unified",
        }
    }

    /// Whether the strategy changes the class embeddings.
    pub fn prompts_text(self) -> bool {
        !matches!(self, StrategyKind::ZeroShot | StrategyKind::VptShallow | StrategyKind::VptDeep)
    }

    /// Whether the strategy changes the image features.
    pub fn prompts_vision(self) -> bool {
        !matches!(self, StrategyKind::ZeroShot | StrategyKind::TextOnly)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase().replace('-', "_");
        let alias = match norm.as_str() {
            "coop" | "text" => "text_only",
            "vpt" => "vpt_deep",
            "upt" => "unified",
            other => other,
        };
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == alias)
            .ok_or_else(|| {
                let names: Vec<_> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown strategy {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// How text prompts are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    #[default]
    Random,
    /// Copy the token embeddings of the template words.
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    /// Text context length `m`.
    pub text_len: usize,
    /// Visual prompt length `n`.
    pub visual_len: usize,
    /// Unified prompt length `n_u`, split between the encoders.
    pub unified_len: usize,
    /// Rows of the transformed unified prompts routed to the text encoder.
    pub split_index: usize,
    /// Prompt length for the shared strategy.
    pub shared_len: usize,
    /// Width `d_u` of unified prompts.
    pub unified_width: usize,
    pub transform_heads: usize,
    pub transform_mlp_ratio: usize,
    pub transform_norm: TransformNorm,
    pub mlp_hidden: usize,
    pub init_std: f64,
    pub text_init: PromptInit,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            text_len: 4,
            visual_len: 4,
            unified_len: 8,
            split_index: 4,
            shared_len: 4,
            unified_width: 64,
            transform_heads: 4,
            transform_mlp_ratio: 4,
            transform_norm: TransformNorm::ResidualBranch,
            mlp_hidden: 64,
            init_std: 0.02,
            text_init: PromptInit::Random,
        }
    }
}

/// Prompt tensors for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct PromptPlan {
    pub text: Option<TextPrompts>,
    pub visual: Option<VisualPrompts>,
}

#[derive(Debug, Clone)]
pub struct PromptStrategy<S> {
    kind: StrategyKind,
    config: StrategyConfig,
    layers: usize,
    text: Option<Parameter<S>>,
    visual: Vec<Parameter<S>>,
    unified: Vec<Parameter<S>>,
    transformer: Option<PromptTransformer<S>>,
    mlp: Option<PromptMlp<S>>,
    text_proj: OutputProjection<S>,
    visual_proj: OutputProjection<S>,
}

impl<S: Scalar> PromptStrategy<S> {
    pub fn init(kind: StrategyKind, config: &StrategyConfig, encoder: &DualEncoder<S>, seed: u64) -> Result<Self> {
        let enc = encoder.config();
        let (dt, dv) = (enc.text.width, enc.vision.width);
        let layers = enc.vision.layers;
        if kind.prompts_text() && kind.prompts_vision() && enc.text.layers != enc.vision.layers {
            return Err(Error::Config(format!(
                "{kind} needs equal encoder depths, got text {} and vision {}",
                enc.text.layers, enc.vision.layers
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let mut s = PromptStrategy {
            kind,
            config: config.clone(),
            layers,
            text: None,
            visual: Vec::new(),
            unified: Vec::new(),
            transformer: None,
            mlp: None,
            text_proj: OutputProjection::Identity,
            visual_proj: OutputProjection::Identity,
        };
        let text_prompt = |rng: &mut ChaCha8Rng| -> Result<Parameter<S>> {
            let m = config.text_len;
            if m == 0 {
                return Err(Error::Config("text prompt length must be at least 1".into()));
            }
            let value = match config.text_init {
                PromptInit::Random => normal_tensor(rng, &[m, dt], std),
                PromptInit::Template => template_embeddings(encoder, m)?,
            };
            Ok(Parameter::trainable("prompt.text", value))
        };
        let visual_prompts = |rng: &mut ChaCha8Rng, count: usize| -> Vec<Parameter<S>> {
            if config.visual_len == 0 {
                return Vec::new();
            }
            (0..count)
                .map(|i| Parameter::trainable(format!("prompt.visual.{i}"), normal_tensor(rng, &[config.visual_len, dv], std)))
                .collect()
        };
        match kind {
            StrategyKind::ZeroShot => {}
            StrategyKind::TextOnly => s.text = Some(text_prompt(&mut rng)?),
            StrategyKind::VptShallow => s.visual = visual_prompts(&mut rng, 1),
            StrategyKind::VptDeep => s.visual = visual_prompts(&mut rng, layers),
            StrategyKind::Joint => {
                s.text = Some(text_prompt(&mut rng)?);
                s.visual = visual_prompts(&mut rng, layers);
            }
            StrategyKind::Shared => {
                if dt != dv || config.unified_width != dt {
                    return Err(Error::Config(format!(
                        "shared prompts need equal encoder widths (text {dt}, vision {dv}, unified {}); \
                         configure equal widths or use the unified strategy",
                        config.unified_width
                    )));
                }
                if config.shared_len == 0 {
                    return Err(Error::Config("shared prompt length must be at least 1".into()));
                }
                s.unified = unified_prompts(&mut rng, layers, config.shared_len, dt, std);
            }
            StrategyKind::Mlp | StrategyKind::Unified => {
                let (n, du) = (config.unified_len, config.unified_width);
                if config.split_index == 0 || config.split_index >= n {
                    return Err(Error::Config(format!(
                        "split_index {} must lie in 1..={} for {n} unified prompts",
                        config.split_index,
                        n.saturating_sub(1)
                    )));
                }
                s.unified = unified_prompts(&mut rng, layers, n, du, std);
                if kind == StrategyKind::Unified {
                    s.transformer = Some(PromptTransformer::init(
                        &mut rng,
                        du,
                        config.transform_heads,
                        config.transform_mlp_ratio,
                        config.transform_norm,
                    )?);
                } else {
                    s.mlp = Some(PromptMlp::init(&mut rng, du, config.mlp_hidden));
                }
                s.text_proj = OutputProjection::init(&mut rng, "proj.text", du, dt);
                s.visual_proj = OutputProjection::init(&mut rng, "proj.visual", du, dv);
            }
        }
        Ok(s)
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// The exact set of parameters an optimizer may update, in a fixed order.
    pub fn trainables(&self) -> Vec<&Parameter<S>> {
        let mut p: Vec<&Parameter<S>> = Vec::new();
        p.extend(self.text.iter());
        p.extend(self.visual.iter());
        p.extend(self.unified.iter());
        if let Some(t) = &self.transformer {
            p.extend(t.params());
        }
        if let Some(m) = &self.mlp {
            p.extend(m.params());
        }
        p.extend(self.text_proj.params());
        p.extend(self.visual_proj.params());
        p
    }

    pub fn trainables_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p: Vec<&mut Parameter<S>> = Vec::new();
        p.extend(self.text.iter_mut());
        p.extend(self.visual.iter_mut());
        p.extend(self.unified.iter_mut());
        if let Some(t) = &mut self.transformer {
            p.extend(t.params_mut());
        }
        if let Some(m) = &mut self.mlp {
            p.extend(m.params_mut());
        }
        p.extend(self.text_proj.params_mut());
        p.extend(self.visual_proj.params_mut());
        p
    }

    pub fn num_trainable(&self) -> usize {
        self.trainables().iter().map(|p| p.numel()).sum()
    }

    pub fn text_prompt(&self) -> Option<&Parameter<S>> {
        self.text.as_ref()
    }

    pub fn visual_prompts(&self) -> &[Parameter<S>] {
        &self.visual
    }

    pub fn unified_prompts(&self) -> &[Parameter<S>] {
        &self.unified
    }

    pub fn transformer(&self) -> Option<&PromptTransformer<S>> {
        self.transformer.as_ref()
    }

    pub fn mlp(&self) -> Option<&PromptMlp<S>> {
        self.mlp.as_ref()
    }

    /// Whether visual prompt positions exist at `layer` of the image encoder.
    pub fn has_visual_prompts_at(&self, layer: usize) -> bool {
        if layer >= self.layers {
            return false;
        }
        match self.kind {
            StrategyKind::ZeroShot | StrategyKind::TextOnly => false,
            StrategyKind::VptShallow | StrategyKind::VptDeep | StrategyKind::Joint => self.config.visual_len > 0,
            StrategyKind::Shared | StrategyKind::Mlp | StrategyKind::Unified => true,
        }
    }

    /// Binds the parameters into `g` and produces the prompts for both encoders.
    pub fn plan(&self, g: &mut Graph<S>) -> Result<PromptPlan> {
        let l = self.layers;
        let mut plan = PromptPlan::default();
        match self.kind {
            StrategyKind::ZeroShot => {}
            StrategyKind::TextOnly | StrategyKind::Joint | StrategyKind::VptShallow | StrategyKind::VptDeep => {
                if let Some(t) = &self.text {
                    let mut layers = vec![None; l];
                    layers[0] = Some(g.param(t));
                    plan.text = Some(TextPrompts {
                        len: self.config.text_len,
                        layers,
                    });
                }
                if self.kind != StrategyKind::TextOnly {
                    let mut layers = vec![None; l];
                    for (i, v) in self.visual.iter().enumerate() {
                        layers[i] = Some(g.param(v));
                    }
                    let len = if self.visual.is_empty() { 0 } else { self.config.visual_len };
                    plan.visual = Some(VisualPrompts { len, layers });
                }
            }
            StrategyKind::Shared => {
                let layers: Vec<Option<Var>> = self.unified.iter().map(|u| Some(g.param(u))).collect();
                plan.text = Some(TextPrompts {
                    len: self.config.shared_len,
                    layers: layers.clone(),
                });
                plan.visual = Some(VisualPrompts {
                    len: self.config.shared_len,
                    layers,
                });
            }
            StrategyKind::Mlp | StrategyKind::Unified => {
                let split = self.config.split_index;
                let mut text_layers = Vec::with_capacity(l);
                let mut visual_layers = Vec::with_capacity(l);
                for u in &self.unified {
                    let uv = g.param(u);
                    let u_hat = match (&self.transformer, &self.mlp) {
                        (Some(t), _) => t.forward(g, uv)?,
                        (None, Some(m)) => mlp_generate(g, uv, m)?,
                        (None, None) => unreachable!("generator initialized with the strategy"),
                    };
                    let (ut, uvis) = split_unified(g, u_hat, split)?;
                    text_layers.push(Some(self.text_proj.forward(g, ut)?));
                    visual_layers.push(Some(self.visual_proj.forward(g, uvis)?));
                }
                plan.text = Some(TextPrompts {
                    len: split,
                    layers: text_layers,
                });
                plan.visual = Some(VisualPrompts {
                    len: self.config.unified_len - split,
                    layers: visual_layers,
                });
            }
        }
        Ok(plan)
    }

    pub(crate) fn from_parts(
        kind: StrategyKind,
        config: StrategyConfig,
        encoder: &DualEncoder<S>,
        values: Vec<(String, Tensor<S>)>,
    ) -> Result<Self> {
        let mut s = Self::init(kind, &config, encoder, 0)?;
        {
            let mut params = s.trainables_mut();
            if params.len() != values.len() {
                return Err(Error::Data(format!(
                    "strategy {kind} expects {} parameters, checkpoint has {}",
                    params.len(),
                    values.len()
                )));
            }
            for (p, (name, value)) in params.iter_mut().zip(values) {
                if p.name() != name {
                    return Err(Error::Data(format!("checkpoint parameter {name} does not match {}", p.name())));
                }
                p.set_value(value)?;
            }
        }
        Ok(s)
    }
}

fn unified_prompts<S: Scalar>(rng: &mut ChaCha8Rng, layers: usize, n: usize, width: usize, std: f64) -> Vec<Parameter<S>> {
    (0..layers)
        .map(|i| Parameter::trainable(format!("prompt.unified.{i}"), normal_tensor(rng, &[n, width], std)))
        .collect()
}

/// Token embeddings of the template words preceding the class name.
pub fn template_embeddings<S: Scalar>(encoder: &DualEncoder<S>, m: usize) -> Result<Tensor<S>> {
    let ids = encoder.tokenizer().word_ids(tokenizer::TEMPLATE_PREFIX)?;
    if ids.len() != m {
        return Err(Error::Config(format!(
            "template initialization needs text_len {} (the template has {} words), got {m}",
            ids.len(),
            ids.len()
        )));
    }
    let table = encoder.text().token_embedding().value();
    let w = table.width();
    let mut data = Vec::with_capacity(m * w);
    for &id in &ids {
        data.extend_from_slice(table.row(id as usize));
    }
    Tensor::new(vec![m, w], data)
}

/// The prompted embedding sequence `[BOS, t₁…t_m, class tokens, EOS, PAD…]`
/// for one class name, before positional embeddings.
pub fn apply_text_prompt<S: Scalar>(
    g: &mut Graph<S>,
    encoder: &DualEncoder<S>,
    prompt: Var,
    class_name: &str,
) -> Result<Var> {
    let m = g.value(prompt).rows();
    if m == 0 {
        return Err(Error::Config("text prompt length must be at least 1".into()));
    }
    let width = encoder.config().text.width;
    if g.value(prompt).width() != width {
        return Err(Error::shape("apply_text_prompt", g.value(prompt).shape(), &[m, width]));
    }
    let seqs = encoder.class_sequences(&[class_name.to_string()], Some(m))?;
    let mut layers = vec![None; encoder.config().text.layers];
    layers[0] = Some(prompt);
    encoder.text().embed_tokens(g, &seqs, Some(&TextPrompts { len: m, layers }))
}

/// Inserts `[len × width]` prompts after the class token of every sequence
/// in `tokens` (`[batch·seq × width]`). With `fresh`, `tokens` holds `[c; Z]`;
/// otherwise it holds `[c; V_prev; Z]` and the previous prompt rows are dropped.
pub fn insert_visual_prompts<S: Scalar>(
    g: &mut Graph<S>,
    tokens: Var,
    prompts: Var,
    batch: usize,
    fresh: bool,
) -> Result<Var> {
    let (rows, width) = (g.value(tokens).rows(), g.value(tokens).width());
    let n = g.value(prompts).rows();
    if g.value(prompts).width() != width {
        return Err(Error::shape("insert_visual_prompts", g.value(prompts).shape(), &[n, width]));
    }
    if batch == 0 || rows % batch != 0 {
        return Err(Error::Length(format!("{rows} token rows do not split into {batch} sequences")));
    }
    let seq = rows / batch;
    let kept = if fresh { 1 } else { 1 + n };
    if seq < kept {
        return Err(Error::Length(format!("sequence of {seq} tokens has no room for {n} prompts")));
    }
    crate::encoder::vision::insert_prompts(g, tokens, prompts, batch, seq, seq - kept, n, fresh)
}
