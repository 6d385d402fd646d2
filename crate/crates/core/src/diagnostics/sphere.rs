//! Projection of joint features and class embeddings onto the unit sphere
//! in three dimensions, for plotting.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PROJECTION_METHOD: &str = "uncentered_pca_then_l2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereProjection {
    /// Projected sample features, `[n × 3]`, unit rows.
    pub features: Vec<[f64; 3]>,
    /// Projected class embeddings, `[k × 3]`, unit rows.
    pub classes: Vec<[f64; 3]>,
    /// Principal directions as rows, `[3 × d]`; rows past `rank` are zero.
    pub components: Vec<Vec<f64>>,
    pub rank: usize,
    /// Set when fewer than three directions carry variance.
    pub padded: bool,
    pub method: String,
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.map(|x| x / n)
    } else {
        v
    }
}

/// Projects the pooled rows of `features` (`[n × d]`) and `classes`
/// (`[k × d]`) onto their top three uncentered principal directions, then
/// normalizes each row. Each direction's sign is chosen so that its
/// largest-magnitude loading is positive.
pub fn project_to_sphere<S: Scalar>(features: &Tensor<S>, classes: &Tensor<S>) -> Result<SphereProjection> {
    if features.rank() != 2 || classes.rank() != 2 || features.width() != classes.width() {
        return Err(Error::shape("project_to_sphere", features.shape(), classes.shape()));
    }
    let d = features.width();
    let n = features.rows() + classes.rows();
    if n < 3 {
        return Err(Error::Data(format!("sphere projection needs at least 3 samples, got {n}")));
    }
    let pooled = DMatrix::from_fn(n, d, |i, j| {
        if i < features.rows() {
            features.at(i, j).as_f64()
        } else {
            classes.at(i - features.rows(), j).as_f64()
        }
    });
    let gram = pooled.transpose() * &pooled;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 * d as f64;

    let mut components = vec![vec![0.0; d]; 3];
    let mut rank = 0;
    for (slot, &idx) in order.iter().take(3).enumerate() {
        if top == 0.0 || eig.eigenvalues[idx] <= tol {
            continue;
        }
        rank += 1;
        let col: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = col
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        components[slot] = col.into_iter().map(|v| v * sign).collect();
    }

    let project = |row: &[S]| -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, c) in out.iter_mut().zip(&components) {
            *o = row.iter().zip(c).map(|(x, w)| x.as_f64() * w).sum();
        }
        normalized(out)
    };
    Ok(SphereProjection {
        features: (0..features.rows()).map(|i| project(features.row(i))).collect(),
        classes: (0..classes.rows()).map(|i| project(classes.row(i))).collect(),
        components,
        rank,
        padded: rank < 3,
        method: PROJECTION_METHOD.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_vectors_map_to_themselves() {
        let f = Tensor::<f64>::matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]).unwrap();
        let c = Tensor::matrix(&[&[0.0, 0.0, 1.0]]).unwrap();
        let p = project_to_sphere(&f, &c).unwrap();
        assert_eq!(p.rank, 3);
        let all: Vec<[f64; 3]> = p.features.iter().chain(&p.classes).copied().collect();
        for (i, v) in all.iter().enumerate() {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v[j] - want).abs() < 1e-12, "{all:?}");
            }
        }
    }

    #[test]
    fn outputs_are_unit_norm() {
        let f = Tensor::<f64>::matrix(&[&[1.0, 2.0, 0.5, -1.0], &[0.2, -0.3, 1.0, 0.0], &[3.0, 1.0, 1.0, 1.0]]).unwrap();
        let c = Tensor::matrix(&[&[0.0, 1.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 0.0]]).unwrap();
        let p = project_to_sphere(&f, &c).unwrap();
        for v in p.features.iter().chain(&p.classes) {
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn low_rank_input_is_flagged() {
        let f = Tensor::<f64>::matrix(&[&[1.0, 1.0, 0.0], &[2.0, 2.0, 0.0], &[-1.0, -1.0, 0.0]]).unwrap();
        let c = Tensor::matrix(&[&[3.0, 3.0, 0.0]]).unwrap();
        let p = project_to_sphere(&f, &c).unwrap();
        assert_eq!(p.rank, 1);
        assert!(p.padded);
        assert_eq!(p.components[1], vec![0.0; 3]);
        assert!((p.features[0][0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples() {
        let f = Tensor::<f64>::matrix(&[&[1.0, 0.0]]).unwrap();
        let c = Tensor::matrix(&[&[0.0, 1.0]]).unwrap();
        assert!(matches!(project_to_sphere(&f, &c), Err(Error::Data(_))));
    }
}
