//! Domain-shifted copies of a test split for out-of-distribution evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftKind {
    /// Independent Gaussian pixel noise on every image.
    Noise { sigma: f64 },
    /// One Gaussian offset image per class, added to all of its samples.
    Prototype { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ShiftKind,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSpec {
    pub fn noise(name: impl Into<String>, sigma: f64, seed: u64) -> Self {
        ShiftSpec {
            name: name.into(),
            kind: ShiftKind::Noise { sigma },
            seed,
        }
    }

    pub fn prototype(name: impl Into<String>, scale: f64, seed: u64) -> Self {
        ShiftSpec {
            name: name.into(),
            kind: ShiftKind::Prototype { scale },
            seed,
        }
    }

    pub fn apply(&self, split: &Split<f32>) -> Result<Split<f32>> {
        match self.kind {
            ShiftKind::Noise { sigma } => additive_noise(split, sigma, self.seed),
            ShiftKind::Prototype { scale } => prototype_perturbation(split, scale, self.seed),
        }
    }
}

fn check_scale(what: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} must be finite and >= 0, got {v}")))
    }
}

fn add(img: &Tensor<f32>, offset: impl Iterator<Item = f64>) -> Result<Tensor<f32>> {
    let data = img.data().iter().zip(offset).map(|(&p, o)| (p as f64 + o) as f32).collect();
    Tensor::new(img.shape().to_vec(), data)
}

pub fn additive_noise(split: &Split<f32>, sigma: f64, seed: u64) -> Result<Split<f32>> {
    check_scale("noise sigma", sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(10);
    let images = split
        .images
        .iter()
        .map(|img| {
            let noise: Vec<f64> = (0..img.len()).map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            add(img, noise.into_iter())
        })
        .collect::<Result<Vec<_>>>()?;
    Split::new(images, split.labels.clone())
}

pub fn prototype_perturbation(split: &Split<f32>, scale: f64, seed: u64) -> Result<Split<f32>> {
    check_scale("prototype perturbation scale", scale)?;
    let Some(first) = split.images.first() else {
        return Ok(split.clone());
    };
    let k = split.labels.iter().max().map_or(0, |&m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let offsets: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..first.len()).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>())
        .collect();
    let images = split
        .images
        .iter()
        .zip(&split.labels)
        .map(|(img, &c)| add(img, offsets[c].iter().copied()))
        .collect::<Result<Vec<_>>>()?;
    Split::new(images, split.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticSpec};

    fn split() -> Split<f32> {
        let spec = SyntheticSpec {
            train_per_class: 2,
            test_per_class: 3,
            image_size: 8,
            ..SyntheticSpec::default()
        };
        synthesize(&spec).unwrap().0.test
    }

    #[test]
    fn zero_shift_is_identity() {
        let s = split();
        assert_eq!(additive_noise(&s, 0.0, 1).unwrap(), s);
        assert_eq!(prototype_perturbation(&s, 0.0, 1).unwrap(), s);
    }

    #[test]
    fn prototype_shift_moves_a_class_together() {
        let s = split();
        let shifted = prototype_perturbation(&s, 1.0, 3).unwrap();
        let delta = |i: usize| -> Vec<f32> {
            shifted.images[i].data().iter().zip(s.images[i].data()).map(|(a, b)| a - b).collect()
        };
        let (a, b) = (delta(0), delta(1));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
        assert!(a.iter().zip(delta(3)).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn spec_json_shape() {
        let spec = ShiftSpec::noise("noise-0.5", 0.5, 2);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"name":"noise-0.5","kind":"noise","sigma":0.5,"seed":2}"#);
        let back: ShiftSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        assert!(additive_noise(&split(), -1.0, 0).is_err());
    }
}
