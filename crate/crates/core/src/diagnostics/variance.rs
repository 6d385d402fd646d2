//! Intra-class visual and inter-class text variance.
//!
//! Per-dimension population variances are reduced to one number by taking
//! their mean over dimensions.

use serde::{Deserialize, Serialize};

use crate::encoder::ClassifierMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SCALARIZATION: &str = "mean_over_dimensions";
pub const FEATURE_SPACE: &str = "l2_normalized_joint";

/// Mean over dimensions of the population variance of `rows` (`[n × d]`).
fn scalar_variance(rows: &[&[f64]]) -> f64 {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        total += rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
    }
    total / d as f64
}

fn rows_f64<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<Vec<Vec<f64>>> {
    if t.rank() != 2 {
        return Err(Error::Data(format!("{what} must be a matrix, got shape {:?}", t.shape())));
    }
    Ok((0..t.rows()).map(|i| t.row(i).iter().map(|v| v.as_f64()).collect()).collect())
}

/// Per-class variances `var_c` and their mean `Var_v`. `features` holds one
/// row per sample.
pub fn intra_class_visual_variance<S: Scalar>(features: &Tensor<S>, labels: &[usize], k: usize) -> Result<(Vec<f64>, f64)> {
    let rows = rows_f64(features, "features")?;
    if rows.len() != labels.len() {
        return Err(Error::Data(format!("{} feature rows but {} labels", rows.len(), labels.len())));
    }
    if k == 0 {
        return Err(Error::Data("no classes".into()));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<&[f64]> = rows
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(r, _)| r.as_slice())
            .collect();
        if members.is_empty() {
            return Err(Error::Data(format!("class {c} has no samples")));
        }
        per_class.push(scalar_variance(&members));
    }
    let mean = per_class.iter().sum::<f64>() / k as f64;
    Ok((per_class, mean))
}

/// `Var_t` over class embeddings given as rows, `[k × d]`.
pub fn inter_class_text_variance_rows<S: Scalar>(rows: &Tensor<S>) -> Result<f64> {
    let rows = rows_f64(rows, "class embeddings")?;
    if rows.len() < 2 {
        return Err(Error::Data(format!("inter-class variance needs k >= 2, got {}", rows.len())));
    }
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Ok(scalar_variance(&refs))
}

pub fn inter_class_text_variance<S: Scalar>(w: &ClassifierMatrix<S>) -> Result<f64> {
    inter_class_text_variance_rows(&w.rows())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub dataset: String,
    pub encoder_checksum: String,
    pub strategy: String,
    pub var_c: Vec<f64>,
    pub var_v: f64,
    pub var_t: f64,
    pub scalarization: String,
    pub feature_space: String,
}

impl VarianceReport {
    pub fn new(dataset: &str, encoder_checksum: &str, strategy: &str, var_c: Vec<f64>, var_v: f64, var_t: f64) -> Self {
        VarianceReport {
            dataset: dataset.to_string(),
            encoder_checksum: encoder_checksum.to_string(),
            strategy: strategy.to_string(),
            var_c,
            var_v,
            var_t,
            scalarization: SCALARIZATION.into(),
            feature_space: FEATURE_SPACE.into(),
        }
    }
}
