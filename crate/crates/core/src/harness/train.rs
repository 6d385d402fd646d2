use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cosine_lr, sample_few_shot, EpisodeSpec, Sgd, TrainConfig};
use crate::autodiff::Graph;
use crate::data::shift::ShiftSpec;
use crate::data::{Dataset, Split};
use crate::diagnostics::{inter_class_text_variance_rows, intra_class_visual_variance};
use crate::encoder::{argmax, DualEncoder};
use crate::error::{BatchDump, Error, Result};
use crate::prompts::{PromptStrategy, StrategyConfig, StrategyKind};
use crate::tensor::{Scalar, Tensor};

const EVAL_CHUNK: usize = 64;
const SHUFFLE_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Fraction of the epoch's samples classified correctly before each update.
    pub accuracy: f64,
    pub last_lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAccuracy {
    pub name: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub targets: Vec<TargetAccuracy>,
    /// Arithmetic mean of the target accuracies.
    pub ood_average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub var_v: f64,
    pub var_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub strategy: StrategyKind,
    pub episode: EpisodeSpec,
    pub precision: String,
    pub train_config: TrainConfig,
    pub strategy_config: StrategyConfig,
    pub trainable_params: usize,
    pub backbone_params: usize,
    pub backbone_checksum: String,
    pub train_indices: Vec<usize>,
    pub epochs: Vec<EpochMetrics>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub diagnostics: RunDiagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftReport>,
    pub wall_time_secs: f64,
}

/// Class embeddings `[k × d]` under the strategy's text prompts.
fn class_rows<S: Scalar>(strategy: &PromptStrategy<S>, encoder: &DualEncoder<S>, class_names: &[String]) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let plan = strategy.plan(&mut g)?;
    let w = encoder.encode_text(&mut g, class_names, plan.text.as_ref())?;
    Ok(g.value(w).clone())
}

/// Image features `[n × d]` under the strategy's visual prompts.
fn image_rows<S: Scalar>(strategy: &PromptStrategy<S>, encoder: &DualEncoder<S>, images: &[Tensor<S>]) -> Result<Tensor<S>> {
    let mut parts = Vec::with_capacity(images.len().div_ceil(EVAL_CHUNK));
    for chunk in images.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let plan = strategy.plan(&mut g)?;
        let z = encoder.encode_images(&mut g, chunk, plan.visual.as_ref())?;
        parts.push(g.value(z).clone());
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

fn predictions<S: Scalar>(encoder: &DualEncoder<S>, z: &Tensor<S>, w: &Tensor<S>) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let wv = g.constant(w.clone());
    let logits = encoder.logits(&mut g, zv, wv)?;
    let l = g.value(logits);
    Ok((0..l.rows()).map(|r| argmax(l.row(r))).collect())
}

/// Top-1 predictions for `images`; ties go to the lowest class index.
pub fn predict<S: Scalar>(
    strategy: &PromptStrategy<S>,
    encoder: &DualEncoder<S>,
    class_names: &[String],
    images: &[Tensor<S>],
) -> Result<Vec<usize>> {
    if images.is_empty() {
        return Err(Error::Data("no images to classify".into()));
    }
    let w = class_rows(strategy, encoder, class_names)?;
    let z = image_rows(strategy, encoder, images)?;
    predictions(encoder, &z, &w)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate<S: Scalar>(
    strategy: &PromptStrategy<S>,
    encoder: &DualEncoder<S>,
    class_names: &[String],
    split: &Split<S>,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let pred = predict(strategy, encoder, class_names, &split.images)?;
    Ok(accuracy(&pred, &split.labels))
}

/// Evaluates an already trained strategy on every shifted target.
pub fn evaluate_shifted<S: Scalar>(
    strategy: &PromptStrategy<S>,
    encoder: &DualEncoder<S>,
    class_names: &[String],
    targets: &[(String, Vec<String>, Split<S>)],
) -> Result<ShiftReport> {
    if targets.is_empty() {
        return Err(Error::Data("no shifted targets".into()));
    }
    let mut out = Vec::with_capacity(targets.len());
    for (name, names, split) in targets {
        if names.as_slice() != class_names {
            return Err(Error::Data(format!("target {name} does not share the source class list")));
        }
        out.push(TargetAccuracy {
            name: name.clone(),
            accuracy: evaluate(strategy, encoder, class_names, split)?,
        });
    }
    let ood_average = out.iter().map(|t| t.accuracy).sum::<f64>() / out.len() as f64;
    Ok(ShiftReport {
        targets: out,
        ood_average,
    })
}

/// Minibatch SGD on the strategy's trainable parameters. The backbone is
/// only read; its checksum is compared before and after.
pub fn train<S: Scalar>(
    strategy: &mut PromptStrategy<S>,
    encoder: &DualEncoder<S>,
    class_names: &[String],
    data: &Split<S>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if strategy.trainables().is_empty() || cfg.epochs == 0 {
        return Ok(TrainOutcome::default());
    }
    let before = encoder.checksum();
    let kind = strategy.kind();
    let fixed_w = if kind.prompts_text() {
        None
    } else {
        Some(class_rows(strategy, encoder, class_names)?)
    };
    let fixed_z = if kind.prompts_vision() {
        None
    } else {
        Some(image_rows(strategy, encoder, &data.images)?)
    };

    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut opt = Sgd::new(cfg.momentum);
    let mut outcome = TrainOutcome::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut lr) = (0.0, 0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, cfg.initial_lr)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let plan = strategy.plan(&mut g)?;
            let w = match &fixed_w {
                Some(t) => g.constant(t.clone()),
                None => encoder.encode_text(&mut g, class_names, plan.text.as_ref())?,
            };
            let z = match &fixed_z {
                Some(t) => {
                    let rows: Vec<&[S]> = batch.iter().map(|&i| t.row(i)).collect();
                    g.constant(Tensor::new(vec![batch.len(), t.width()], rows.concat())?)
                }
                None => {
                    let imgs: Vec<Tensor<S>> = batch.iter().map(|&i| data.images[i].clone()).collect();
                    encoder.encode_images(&mut g, &imgs, plan.visual.as_ref())?
                }
            };
            let logits = encoder.logits(&mut g, z, w)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let loss_value = g.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss(Box::new(BatchDump {
                    epoch,
                    step,
                    learning_rate: lr,
                    loss: loss_value,
                    sample_indices: batch.to_vec(),
                    labels,
                })));
            }
            let l = g.value(logits);
            hits += (0..l.rows()).filter(|&r| argmax(l.row(r)) == labels[r]).count();
            loss_sum += loss_value * batch.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor<S>> = strategy.trainables().iter().map(|p| g.param_grad(p)).collect();
            opt.step(&mut strategy.trainables_mut(), &grads, lr)?;
            step += 1;
        }
        outcome.epochs.push(EpochMetrics {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: hits as f64 / n as f64,
            last_lr: lr,
        });
    }
    outcome.steps = step;
    if encoder.checksum() != before {
        return Err(Error::Integrity("backbone parameters changed during training".into()));
    }
    Ok(outcome)
}

/// Samples an episode, trains a fresh strategy on it and evaluates the
/// result on the test split and on any shifted copies of it.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<S: Scalar>(
    dataset: &Dataset<f32>,
    encoder: &DualEncoder<S>,
    kind: StrategyKind,
    strategy_cfg: &StrategyConfig,
    train_cfg: &TrainConfig,
    episode: &EpisodeSpec,
    shifts: &[ShiftSpec],
) -> Result<(RunRecord, PromptStrategy<S>)> {
    let start = Instant::now();
    let names = &dataset.class_names;
    let indices = sample_few_shot(&dataset.train, names, episode)?;
    let train_split: Split<S> = dataset.train.subset(&indices).cast();
    let test: Split<S> = dataset.test.cast();
    let mut strategy = PromptStrategy::init(kind, strategy_cfg, encoder, episode.seed)?;
    let outcome = train(&mut strategy, encoder, names, &train_split, train_cfg, episode.seed)?;

    let w = class_rows(&strategy, encoder, names)?;
    let z_train = image_rows(&strategy, encoder, &train_split.images)?;
    let z_test = image_rows(&strategy, encoder, &test.images)?;
    let train_accuracy = accuracy(&predictions(encoder, &z_train, &w)?, &train_split.labels);
    let test_accuracy = accuracy(&predictions(encoder, &z_test, &w)?, &test.labels);
    let (_, var_v) = intra_class_visual_variance(&z_test, &test.labels, names.len())?;
    let var_t = if names.len() >= 2 { inter_class_text_variance_rows(&w)? } else { 0.0 };

    let shift = if shifts.is_empty() {
        None
    } else {
        let targets = shifts
            .iter()
            .map(|s| Ok((s.name.clone(), names.clone(), s.apply(&dataset.test)?.cast())))
            .collect::<Result<Vec<_>>>()?;
        Some(evaluate_shifted(&strategy, encoder, names, &targets)?)
    };

    let record = RunRecord {
        dataset: dataset.name.clone(),
        strategy: kind,
        episode: *episode,
        precision: S::NAME.into(),
        train_config: train_cfg.clone(),
        strategy_config: strategy_cfg.clone(),
        trainable_params: strategy.num_trainable(),
        backbone_params: encoder.num_params(),
        backbone_checksum: encoder.checksum(),
        train_indices: indices,
        epochs: outcome.epochs,
        train_accuracy,
        test_accuracy,
        diagnostics: RunDiagnostics { var_v, var_t },
        shift,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((record, strategy))
}
