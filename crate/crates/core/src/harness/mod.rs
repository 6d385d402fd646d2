//! Few-shot episodes, prompt training and evaluation.

mod matrix;
mod optim;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub use matrix::{run_matrix, summarize, write_csv, write_jsonl, write_summary_csv, CellResult, CellStatus, MatrixSpec, SummaryRow};
pub use optim::{cosine_lr, Sgd};
pub use train::{
    evaluate, evaluate_shifted, predict, run_episode, train, EpochMetrics, RunDiagnostics, RunRecord, ShiftReport, TargetAccuracy,
    TrainOutcome,
};

/// Shot counts of the few-shot protocol.
pub const ALLOWED_SHOTS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub shots: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(shots: usize, seed: u64) -> Result<Self> {
        validate_shots(shots)?;
        Ok(EpisodeSpec { shots, seed })
    }
}

pub fn validate_shots(shots: usize) -> Result<()> {
    if ALLOWED_SHOTS.contains(&shots) {
        Ok(())
    } else {
        Err(Error::Config(format!("shots must be one of {{1,2,4,8,16}}, got {shots}")))
    }
}

/// Draws `shots` training indices per class, uniformly without replacement.
///
/// Class `c` uses a ChaCha8 generator seeded with `spec.seed` on stream `c`,
/// so each class's draw is independent of every other class.
pub fn sample_few_shot<S: Scalar>(split: &Split<S>, class_names: &[String], spec: &EpisodeSpec) -> Result<Vec<usize>> {
    validate_shots(spec.shots)?;
    let mut picked = Vec::with_capacity(class_names.len() * spec.shots);
    for (c, name) in class_names.iter().enumerate() {
        let mut pool = split.indices_of(c);
        if pool.len() < spec.shots {
            return Err(Error::Data(format!(
                "class {c} ({name}) has {} training examples, {} shots requested",
                pool.len(),
                spec.shots
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(c as u64);
        for i in 0..spec.shots {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        picked.extend_from_slice(&pool[..spec.shots]);
    }
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.002,
            batch_size: 32,
            epochs: 50,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}
