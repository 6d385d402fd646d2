//! Attention response between visual prompt tokens and image patches.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::pftensor;
use crate::prompts::PromptStrategy;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub image: usize,
    pub layer: usize,
    pub heads: usize,
    pub prompt_len: usize,
    /// Patches per side; the patch axis has `grid²` entries.
    pub grid: usize,
    /// `[prompt_len × patches]`, mean over heads.
    pub mean: Tensor<f64>,
    /// `[heads × prompt_len × patches]`.
    pub per_head: Tensor<f64>,
    /// Sum of each complete attention row the map was cut from, `[heads × prompt_len]`.
    pub row_sums: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    image: usize,
    layer: usize,
    heads: usize,
    prompt_len: usize,
    grid: [usize; 2],
    mean_file: String,
    mean_shape: Vec<usize>,
    per_head_file: String,
    per_head_shape: Vec<usize>,
    head_aggregation: String,
}

/// Maps for each image at block `layer` of the image encoder.
pub fn attention_response_map<S: Scalar>(
    encoder: &DualEncoder<S>,
    strategy: &PromptStrategy<S>,
    images: &[Tensor<S>],
    layer: usize,
) -> Result<Vec<AttentionMap>> {
    let vcfg = &encoder.config().vision;
    if layer >= vcfg.layers {
        return Err(Error::Index(format!("layer {layer} outside 0..{}", vcfg.layers)));
    }
    if !strategy.has_visual_prompts_at(layer) {
        return Err(Error::Contract(format!(
            "strategy {} has no visual prompts at layer {layer}",
            strategy.kind()
        )));
    }
    let mut g = Graph::new();
    let plan = strategy.plan(&mut g)?;
    let out = encoder.vision().forward(&mut g, images, plan.visual.as_ref())?;
    let n = out.prompt_len;
    if n == 0 {
        return Err(Error::Contract("visual prompt length is zero".into()));
    }
    let probs = g
        .attention_probs(out.attention[layer])
        .expect("vision blocks record attention");
    let (heads, seq) = (vcfg.heads, out.seq_len);
    let s = vcfg.num_patches();
    let p = probs.data();
    let mut maps = Vec::with_capacity(images.len());
    for b in 0..images.len() {
        let mut per_head = vec![0.0; heads * n * s];
        let mut mean = vec![0.0; n * s];
        let mut row_sums = Vec::with_capacity(heads * n);
        for h in 0..heads {
            for i in 0..n {
                let base = ((b * heads + h) * seq + 1 + i) * seq;
                let row = &p[base..base + seq];
                row_sums.push(row.iter().map(|v| v.as_f64()).sum());
                for j in 0..s {
                    let v = row[1 + n + j].as_f64();
                    per_head[(h * n + i) * s + j] = v;
                    mean[i * s + j] += v / heads as f64;
                }
            }
        }
        maps.push(AttentionMap {
            image: b,
            layer,
            heads,
            prompt_len: n,
            grid: vcfg.grid(),
            mean: Tensor::new(vec![n, s], mean)?,
            per_head: Tensor::new(vec![heads, n, s], per_head)?,
            row_sums,
        });
    }
    Ok(maps)
}

/// Writes `<stem>.pft` (`[n, grid, grid]`), `<stem>_heads.pft`
/// (`[heads, n, grid, grid]`) and the `<stem>.json` sidecar.
pub fn save_attention_map(map: &AttentionMap, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = map.grid;
    let mean = map.mean.reshape(&[map.prompt_len, g, g])?;
    let heads = map.per_head.reshape(&[map.heads, map.prompt_len, g, g])?;
    let mean_file = format!("{stem}.pft");
    let per_head_file = format!("{stem}_heads.pft");
    pftensor::save(&dir.join(&mean_file), &mean)?;
    pftensor::save(&dir.join(&per_head_file), &heads)?;
    let sidecar = Sidecar {
        image: map.image,
        layer: map.layer,
        heads: map.heads,
        prompt_len: map.prompt_len,
        grid: [g, g],
        mean_shape: mean.shape().to_vec(),
        per_head_shape: heads.shape().to_vec(),
        mean_file,
        per_head_file,
        head_aggregation: "mean".into(),
    };
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
