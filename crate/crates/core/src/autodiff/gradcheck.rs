//! Central finite differences for checking analytic gradients.
//!
//! Only forward evaluations are used here, so the check stays independent of
//! the backward rules it validates.

use rand::seq::index::sample;
use rand::Rng;

use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative error, so coordinates whose true gradient
/// is numerically zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Coordinates whose gradient is below this fraction of the largest
/// component in the same tensor are compared on that tensor's scale, since
/// at step 1e-5 their central difference is dominated by rounding.
pub const TENSOR_SCALE_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, REL_ERROR_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for each requested coordinate.
pub fn central_difference<F>(mut f: F, x: &Tensor<f64>, coords: &[usize], step: f64) -> Vec<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    coords
        .iter()
        .map(|&i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
        .collect()
}

/// Directional derivative along `dir` by central differences.
pub fn directional_difference<F>(mut f: F, x: &Tensor<f64>, dir: &[f64], step: f64) -> f64
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let shifted = |sign: f64| {
        let mut t = x.clone();
        for (v, &d) in t.data_mut().iter_mut().zip(dir) {
            *v += sign * step * d;
        }
        t
    };
    (f(&shifted(1.0)) - f(&shifted(-1.0))) / (2.0 * step)
}

/// Picks up to `count` distinct coordinates of a tensor with `len` elements.
pub fn sample_coords<R: Rng + ?Sized>(rng: &mut R, len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut v = sample(rng, len, count).into_vec();
    v.sort_unstable();
    v
}

/// Result of checking one tensor.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub directional_rel_error: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.max(self.directional_rel_error)
    }
}

/// Compares `analytic` against finite differences of `f` at `x` on sampled
/// coordinates and along one random direction.
pub fn check_tensor<F, R>(
    name: &str,
    mut f: F,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    rng: &mut R,
    coords: usize,
) -> GradCheck
where
    F: FnMut(&Tensor<f64>) -> f64,
    R: Rng + ?Sized,
{
    let picked = sample_coords(rng, x.len(), coords);
    let numeric = central_difference(&mut f, x, &picked, FD_STEP);
    let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_rel_error = picked
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| relative_error_with_floor(analytic.data()[i], n, TENSOR_SCALE_FLOOR * scale))
        .fold(0.0, f64::max);

    let dir: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();
    let numeric_dir = directional_difference(&mut f, x, &dir, FD_STEP);
    let analytic_dir: f64 = analytic.data().iter().zip(&dir).map(|(a, d)| a * d).sum();

    GradCheck {
        name: name.to_string(),
        coords_checked: picked.len(),
        max_rel_error,
        directional_rel_error: relative_error(analytic_dir, numeric_dir),
    }
}
