use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_episode, validate_shots, EpisodeSpec, RunRecord, TrainConfig};
use crate::data::shift::ShiftSpec;
use crate::data::Dataset;
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::prompts::{StrategyConfig, StrategyKind};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixSpec {
    pub strategies: Vec<StrategyKind>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for MatrixSpec {
    fn default() -> Self {
        MatrixSpec {
            strategies: StrategyKind::ALL.to_vec(),
            shots: super::ALLOWED_SHOTS.to_vec(),
            seeds: vec![1, 2, 3],
        }
    }
}

impl MatrixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.shots.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("matrix needs at least one strategy, shot count and seed".into()));
        }
        self.shots.iter().try_for_each(|&s| validate_shots(s))
    }

    pub fn num_cells(&self) -> usize {
        self.strategies.len() * self.shots.len() * self.seeds.len()
    }

    /// Cells in strategy-major, then shots, then seed order.
    pub fn cells(&self) -> Vec<(StrategyKind, usize, u64)> {
        let mut out = Vec::with_capacity(self.num_cells());
        for &k in &self.strategies {
            for &s in &self.shots {
                for &seed in &self.seeds {
                    out.push((k, s, seed));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: StrategyKind,
    pub shots: usize,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<RunRecord>,
}

impl CellResult {
    pub fn accuracy(&self) -> Option<f64> {
        self.record.as_ref().map(|r| r.test_accuracy)
    }

    pub fn ood_average(&self) -> Option<f64> {
        self.record.as_ref().and_then(|r| r.shift.as_ref()).map(|s| s.ood_average)
    }
}

/// Runs every cell of the grid on up to `threads` workers. Results come
/// back in [`MatrixSpec::cells`] order; a failing cell is recorded and the
/// rest of the grid still runs.
pub fn run_matrix<S: Scalar>(
    dataset: &Dataset<f32>,
    encoder: &DualEncoder<S>,
    spec: &MatrixSpec,
    strategy_cfg: &StrategyConfig,
    train_cfg: &TrainConfig,
    shifts: &[ShiftSpec],
    threads: usize,
) -> Result<Vec<CellResult>> {
    spec.validate()?;
    train_cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let cells = spec.cells();
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|&(kind, shots, seed)| {
                let episode = EpisodeSpec { shots, seed };
                match run_episode(dataset, encoder, kind, strategy_cfg, train_cfg, &episode, shifts) {
                    Ok((record, _)) => CellResult {
                        strategy: kind,
                        shots,
                        seed,
                        status: CellStatus::Ok,
                        error: None,
                        record: Some(record),
                    },
                    Err(e) => CellResult {
                        strategy: kind,
                        shots,
                        seed,
                        status: CellStatus::Failed,
                        error: Some(e.to_string()),
                        record: None,
                    },
                }
            })
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: StrategyKind,
    pub shots: usize,
    pub seeds: usize,
    pub completed: usize,
    pub mean_accuracy: Option<f64>,
    pub mean_ood_average: Option<f64>,
    pub mean_train_accuracy: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Seed-averaged rows, one per (strategy, shots), in first-seen order.
pub fn summarize(cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(StrategyKind, usize)> = Vec::new();
    for c in cells {
        if !keys.contains(&(c.strategy, c.shots)) {
            keys.push((c.strategy, c.shots));
        }
    }
    keys.into_iter()
        .map(|(strategy, shots)| {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.strategy == strategy && c.shots == shots).collect();
            let records: Vec<&RunRecord> = group.iter().filter_map(|c| c.record.as_ref()).collect();
            let acc: Vec<f64> = records.iter().map(|r| r.test_accuracy).collect();
            let train: Vec<f64> = records.iter().map(|r| r.train_accuracy).collect();
            let ood: Vec<f64> = records.iter().filter_map(|r| r.shift.as_ref().map(|s| s.ood_average)).collect();
            SummaryRow {
                strategy,
                shots,
                seeds: group.len(),
                completed: records.len(),
                mean_accuracy: mean(&acc),
                mean_ood_average: if ood.len() == records.len() { mean(&ood) } else { None },
                mean_train_accuracy: mean(&train),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn status_name(s: CellStatus) -> &'static str {
    match s {
        CellStatus::Ok => "ok",
        CellStatus::Failed => "failed",
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Per-cell table: `strategy,shots,seed,accuracy,ood_average,status`.
pub fn write_csv(cells: &[CellResult], path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "shots", "seed", "accuracy", "ood_average", "status"])?;
    for c in cells {
        w.write_record([
            c.strategy.name().to_string(),
            c.shots.to_string(),
            c.seed.to_string(),
            fmt_opt(c.accuracy()),
            fmt_opt(c.ood_average()),
            status_name(c.status).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "strategy",
        "shots",
        "seeds",
        "completed",
        "mean_accuracy",
        "mean_ood_average",
        "mean_train_accuracy",
    ])?;
    for r in rows {
        w.write_record([
            r.strategy.name().to_string(),
            r.shots.to_string(),
            r.seeds.to_string(),
            r.completed.to_string(),
            fmt_opt(r.mean_accuracy),
            fmt_opt(r.mean_ood_average),
            fmt_opt(r.mean_train_accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends one JSON object per cell.
pub fn write_jsonl(cells: &[CellResult], path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for c in cells {
        let line = serde_json::to_string(c).map_err(|e| Error::json(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
