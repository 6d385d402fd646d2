//! Reference implementations shared by the integration suites. Every oracle
//! here works on plain `f64` slices with explicit loops and never goes
//! through the tape.
#![allow(dead_code, clippy::too_many_arguments, clippy::needless_range_loop)]

use promptlab::autodiff::gradcheck::{check_tensor, GradCheck};
use promptlab::autodiff::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, TransformerBlock, LAYER_NORM_EPS};
use promptlab::autodiff::{Graph, Var};
use promptlab::data::{class_names, SyntheticSpec};
use promptlab::diagnostics::attention_response_map;
use promptlab::encoder::{DualEncoder, EncoderConfig};
use promptlab::prompts::{PromptStrategy, PromptTransformer, StrategyConfig, StrategyKind, TransformNorm};
use promptlab::{Result, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn names(k: usize) -> Vec<String> {
    class_names(&SyntheticSpec {
        classes: k,
        ..SyntheticSpec::default()
    })
    .expect("class names")
}

pub fn random_images<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, cfg: &EncoderConfig) -> Vec<Tensor<S>> {
    let v = &cfg.vision;
    let shape = [v.image_size, v.image_size, v.channels];
    let len = shape.iter().product::<usize>();
    (0..n)
        .map(|_| {
            let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1.5..1.5)).collect();
            Tensor::from_f64(&shape, &data).expect("image")
        })
        .collect()
}

pub fn to_rows<S: Scalar>(t: &Tensor<S>) -> Rows {
    (0..t.rows()).map(|i| t.row(i).iter().map(|v| v.as_f64()).collect()).collect()
}

/// Logits `[batch × k]` of the prompted pipeline.
pub fn pipeline_logits<S: Scalar>(
    g: &mut Graph<S>,
    strategy: &PromptStrategy<S>,
    encoder: &DualEncoder<S>,
    class_names: &[String],
    images: &[Tensor<S>],
) -> Result<Var> {
    let plan = strategy.plan(g)?;
    let w = encoder.encode_text(g, class_names, plan.text.as_ref())?;
    let z = encoder.encode_images(g, images, plan.visual.as_ref())?;
    encoder.logits(g, z, w)
}

/// Logits computed with no prompts at all.
pub fn zero_shot_logits<S: Scalar>(encoder: &DualEncoder<S>, class_names: &[String], images: &[Tensor<S>]) -> Tensor<S> {
    let mut g = Graph::new();
    let w = encoder.encode_text(&mut g, class_names, None).expect("text");
    let z = encoder.encode_images(&mut g, images, None).expect("images");
    let l = encoder.logits(&mut g, z, w).expect("logits");
    g.value(l).clone()
}

pub fn pipeline_loss(
    strategy: &PromptStrategy<f64>,
    encoder: &DualEncoder<f64>,
    class_names: &[String],
    images: &[Tensor<f64>],
    labels: &[usize],
) -> f64 {
    let mut g = Graph::new();
    let logits = pipeline_logits(&mut g, strategy, encoder, class_names, images).expect("forward");
    let loss = g.cross_entropy(logits, labels).expect("loss");
    g.value(loss).data()[0]
}

/// Finite-difference check of every trainable tensor of `kind`.
pub fn strategy_gradcheck(
    kind: StrategyKind,
    cfg: &StrategyConfig,
    encoder: &DualEncoder<f64>,
    class_names: &[String],
    images: &[Tensor<f64>],
    labels: &[usize],
    seed: u64,
    coords: usize,
) -> Vec<GradCheck> {
    let strategy = PromptStrategy::init(kind, cfg, encoder, seed).expect("strategy");
    let mut g = Graph::new();
    let logits = pipeline_logits(&mut g, &strategy, encoder, class_names, images).expect("forward");
    let loss = g.cross_entropy(logits, labels).expect("loss");
    g.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = strategy.trainables().iter().map(|p| g.param_grad(p)).collect();

    let mut r = rng(seed ^ 0x9e37);
    let mut out = Vec::new();
    for (i, grad) in analytic.iter().enumerate() {
        let x = strategy.trainables()[i].value().clone();
        let name = strategy.trainables()[i].name().to_string();
        let f = |v: &Tensor<f64>| {
            let mut s = strategy.clone();
            s.trainables_mut()[i].set_value(v.clone()).expect("same shape");
            pipeline_loss(&s, encoder, class_names, images, labels)
        };
        out.push(check_tensor(&name, f, &x, grad, &mut r, coords));
    }
    out
}

// ---- dense building blocks ----

pub fn tensor_vec<S: Scalar>(t: &Tensor<S>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn layer_norm(x: &Rows, ln: &LayerNorm<f64>) -> Rows {
    let gamma = ln.gamma.value().data();
    let beta = ln.beta.value().data();
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn linear(x: &Rows, lin: &Linear<f64>) -> Rows {
    let w = lin.weight.value();
    let b = lin.bias.value().data();
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fan_out)
                .map(|c| b[c] + (0..fan_in).map(|r| row[r] * w.at(r, c)).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn feed_forward(x: &Rows, ffn: &FeedForward<f64>) -> Rows {
    let h: Rows = linear(x, &ffn.fc1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(&h, &ffn.fc2)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// Softmax attention weights of one sequence, indexed `[head][query][key]`.
pub fn attention_probs(x: &Rows, mha: &MultiHeadAttention<f64>, causal: bool) -> Vec<Rows> {
    let qkv = linear(x, &mha.qkv);
    let d = mha.width();
    let dh = d / mha.heads;
    let n = x.len();
    (0..mha.heads)
        .map(|h| {
            (0..n)
                .map(|i| {
                    let keys = if causal { i + 1 } else { n };
                    let scores: Vec<f64> = (0..keys)
                        .map(|j| {
                            (0..dh).map(|c| qkv[i][h * dh + c] * qkv[j][d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let mut row: Vec<f64> = e.iter().map(|v| v / z).collect();
                    row.resize(n, 0.0);
                    row
                })
                .collect()
        })
        .collect()
}

pub fn self_attention(x: &Rows, mha: &MultiHeadAttention<f64>) -> Rows {
    let probs = attention_probs(x, mha, false);
    let qkv = linear(x, &mha.qkv);
    let d = mha.width();
    let dh = d / mha.heads;
    let n = x.len();
    let mixed: Rows = (0..n)
        .map(|i| {
            let mut row = vec![0.0; d];
            for h in 0..mha.heads {
                for j in 0..n {
                    for c in 0..dh {
                        row[h * dh + c] += probs[h][i][j] * qkv[j][2 * d + h * dh + c];
                    }
                }
            }
            row
        })
        .collect();
    linear(&mixed, &mha.out)
}

/// `U′ = SA(U) + LN(U)`, `Û = FFN(LN(U′)) + LN(U′)`.
pub fn upt_oracle(u: &Rows, t: &PromptTransformer<f64>) -> Rows {
    match t.norm {
        TransformNorm::ResidualBranch => {
            let u_prime = add(&self_attention(u, &t.attn), &layer_norm(u, &t.ln_in));
            let ln = layer_norm(&u_prime, &t.ln_mid);
            add(&feed_forward(&ln, &t.ffn), &ln)
        }
        TransformNorm::PreNorm => {
            let u_prime = add(&self_attention(&layer_norm(u, &t.ln_in), &t.attn), u);
            let ln = layer_norm(&u_prime, &t.ln_mid);
            add(&feed_forward(&ln, &t.ffn), &u_prime)
        }
    }
}

/// Full attention rows of one image at a block, from that block's input.
pub fn block_attention(input: &Rows, block: &TransformerBlock<f64>) -> Vec<Rows> {
    attention_probs(&layer_norm(input, &block.ln1), &block.attn, false)
}

// ---- variance ----

/// `(1 / 2n²) Σᵢ Σⱼ ‖xᵢ − xⱼ‖² / d`: the mean per-dimension population variance.
pub fn pairwise_variance(rows: &[&[f64]]) -> f64 {
    let n = rows.len() as f64;
    let d = rows[0].len() as f64;
    let mut total = 0.0;
    for a in rows {
        for b in rows {
            total += a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    total / (2.0 * n * n * d)
}

pub fn oracle_intra(features: &Rows, labels: &[usize], k: usize) -> (Vec<f64>, f64) {
    let per: Vec<f64> = (0..k)
        .map(|c| {
            let members: Vec<&[f64]> = features
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| r.as_slice())
                .collect();
            pairwise_variance(&members)
        })
        .collect();
    let mean = per.iter().sum::<f64>() / k as f64;
    (per, mean)
}

pub fn oracle_inter(rows: &Rows) -> f64 {
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    pairwise_variance(&refs)
}

// ---- linear probe ----

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent. Returns the training accuracy and the model.
pub struct Probe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Rows,
    b: Vec<f64>,
}

impl Probe {
    pub fn fit(x: &Rows, y: &[usize], k: usize, steps: usize, lr: f64) -> Probe {
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                1.0 / v.sqrt().max(1e-12)
            })
            .collect();
        let mut probe = Probe {
            mean,
            scale,
            w: vec![vec![0.0; d]; k],
            b: vec![0.0; k],
        };
        let xs: Rows = x.iter().map(|r| probe.standardize(r)).collect();
        for _ in 0..steps {
            let mut gw = vec![vec![0.0; d]; k];
            let mut gb = vec![0.0; k];
            for (row, &label) in xs.iter().zip(y) {
                let p = probe.probs_std(row);
                for c in 0..k {
                    let e = p[c] - if c == label { 1.0 } else { 0.0 };
                    gb[c] += e / n;
                    for j in 0..d {
                        gw[c][j] += e * row[j] / n;
                    }
                }
            }
            for c in 0..k {
                probe.b[c] -= lr * gb[c];
                for j in 0..d {
                    probe.w[c][j] -= lr * gw[c][j];
                }
            }
        }
        probe
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn probs_std(&self, r: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = self
            .w
            .iter()
            .zip(&self.b)
            .map(|(w, b)| b + w.iter().zip(r).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn predict(&self, r: &[f64]) -> usize {
        let p = self.probs_std(&self.standardize(r));
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &Rows, y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count();
        hits as f64 / y.len() as f64
    }
}

/// Largest deviation of the emitted maps from rows recomputed out of the
/// hooked block input, and largest deviation of a full row sum from 1.
pub struct MapCheck {
    pub maps: usize,
    pub max_map_diff: f64,
    pub max_row_sum_dev: f64,
    pub max_oracle_row_sum_dev: f64,
}

pub fn check_attention_maps(
    encoder: &DualEncoder<f64>,
    strategy: &PromptStrategy<f64>,
    images: &[Tensor<f64>],
    layer: usize,
) -> MapCheck {
    let maps = attention_response_map(encoder, strategy, images, layer).expect("maps");
    let mut g = Graph::new();
    let plan = strategy.plan(&mut g).expect("plan");
    let out = encoder.vision().forward(&mut g, images, plan.visual.as_ref()).expect("forward");
    let hooked = to_rows(g.value(out.layer_inputs[layer]));
    let (seq, n) = (out.seq_len, out.prompt_len);
    let block = &encoder.vision().blocks()[layer];
    let s = encoder.config().vision.num_patches();
    let mut check = MapCheck {
        maps: maps.len(),
        max_map_diff: 0.0,
        max_row_sum_dev: 0.0,
        max_oracle_row_sum_dev: 0.0,
    };
    for (b, map) in maps.iter().enumerate() {
        let probs = block_attention(&hooked[b * seq..(b + 1) * seq].to_vec(), block);
        for (h, head) in probs.iter().enumerate() {
            for i in 0..n {
                let row = &head[1 + i];
                let dev = (row.iter().sum::<f64>() - 1.0).abs();
                check.max_oracle_row_sum_dev = check.max_oracle_row_sum_dev.max(dev);
                for j in 0..s {
                    let got = map.per_head.data()[(h * n + i) * s + j];
                    check.max_map_diff = check.max_map_diff.max((got - row[1 + n + j]).abs());
                }
            }
        }
        for i in 0..n {
            for j in 0..s {
                let mean = (0..map.heads).map(|h| probs[h][1 + i][1 + n + j]).sum::<f64>() / map.heads as f64;
                check.max_map_diff = check.max_map_diff.max((map.mean.data()[i * s + j] - mean).abs());
            }
        }
        for v in &map.row_sums {
            check.max_row_sum_dev = check.max_row_sum_dev.max((v - 1.0).abs());
        }
    }
    check
}
