//! Accuracy gain over zero-shot against the variance statistics of each dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::VarianceReport;
use crate::error::{Error, Result};
use crate::harness::RunRecord;
use crate::prompts::StrategyKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub dataset: String,
    pub var_v: f64,
    pub var_t: f64,
    pub strategy: StrategyKind,
    pub shots: usize,
    pub accuracy: f64,
    pub zero_shot_accuracy: f64,
    pub gain: f64,
}

fn mean_accuracy<'a>(records: impl Iterator<Item = &'a RunRecord>) -> Option<f64> {
    let acc: Vec<f64> = records.map(|r| r.test_accuracy).collect();
    (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
}

/// One row per (dataset, strategy, shots) with seed-averaged accuracies.
/// Gain is the strategy's accuracy minus the dataset's zero-shot accuracy.
pub fn gain_vs_variance_table(records: &[RunRecord], reports: &[VarianceReport]) -> Result<Vec<GainRow>> {
    let mut rows = Vec::new();
    for report in reports {
        let mine: Vec<&RunRecord> = records.iter().filter(|r| r.dataset == report.dataset).collect();
        let zero_shot = mean_accuracy(mine.iter().copied().filter(|r| r.strategy == StrategyKind::ZeroShot))
            .ok_or_else(|| Error::Data(format!("dataset {} has no zero-shot run", report.dataset)))?;
        let mut keys: Vec<(StrategyKind, usize)> = Vec::new();
        for r in &mine {
            if !keys.contains(&(r.strategy, r.episode.shots)) {
                keys.push((r.strategy, r.episode.shots));
            }
        }
        for (strategy, shots) in keys {
            let accuracy = mean_accuracy(
                mine.iter()
                    .copied()
                    .filter(|r| r.strategy == strategy && r.episode.shots == shots),
            )
            .expect("key comes from a record");
            let accuracy = if strategy == StrategyKind::ZeroShot { zero_shot } else { accuracy };
            rows.push(GainRow {
                dataset: report.dataset.clone(),
                var_v: report.var_v,
                var_t: report.var_t,
                strategy,
                shots,
                accuracy,
                zero_shot_accuracy: zero_shot,
                gain: accuracy - zero_shot,
            });
        }
    }
    Ok(rows)
}

pub fn write_gain_csv(rows: &[GainRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "var_v", "var_t", "strategy", "shots", "accuracy", "zero_shot_accuracy", "gain"])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.var_v.to_string(),
            r.var_t.to_string(),
            r.strategy.name().to_string(),
            r.shots.to_string(),
            r.accuracy.to_string(),
            r.zero_shot_accuracy.to_string(),
            r.gain.to_string(),
        ])?;
    }
    w.flush().map_err(|e| crate::error::Error::io(path, e))
}
