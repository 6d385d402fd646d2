//! Synthetic classification sets with two statistical knobs: pixel noise
//! around class prototypes (intra-class visual spread) and token overlap
//! between class names (inter-class text spread).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::words::CLASS_WORDS;
use super::{save_dataset, Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub name: String,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of the prototype pixels.
    pub prototype_scale: f64,
    /// Standard deviation of the per-sample pixel noise.
    pub sigma_v: f64,
    /// Fraction of name tokens shared by all classes.
    pub rho: f64,
    /// Words per class name.
    pub name_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            name: "synthetic".into(),
            classes: 5,
            train_per_class: 32,
            test_per_class: 20,
            image_size: 32,
            channels: 1,
            prototype_scale: 1.0,
            sigma_v: 0.3,
            rho: 0.0,
            name_len: 3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("classes and samples per class must be positive".into()));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("image size and channels must be positive".into()));
        }
        if !(self.sigma_v >= 0.0 && self.sigma_v.is_finite()) {
            return Err(Error::Config(format!("sigma_v must be finite and >= 0, got {}", self.sigma_v)));
        }
        if !(self.prototype_scale >= 0.0 && self.prototype_scale.is_finite()) {
            return Err(Error::Config(format!(
                "prototype_scale must be finite and >= 0, got {}",
                self.prototype_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.name_len == 0 {
            return Err(Error::Config("name_len must be at least 1".into()));
        }
        let shared = self.shared_words();
        let needed = shared + self.classes * (self.name_len - shared);
        if needed > CLASS_WORDS.len() {
            return Err(Error::Config(format!(
                "{} classes of {} words need {needed} distinct words, vocabulary has {}",
                self.classes,
                self.name_len,
                CLASS_WORDS.len()
            )));
        }
        Ok(())
    }

    /// Words common to every class name, `round(ρ · name_len)` capped so
    /// that each name keeps one word of its own.
    pub fn shared_words(&self) -> usize {
        ((self.rho * self.name_len as f64).round() as usize).min(self.name_len - 1)
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, self.channels]
    }
}

/// Class names drawn from the fixed vocabulary. All names start with the
/// same shared words and end with words unique to the class.
pub fn class_names(spec: &SyntheticSpec) -> Result<Vec<String>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let mut words: Vec<&str> = CLASS_WORDS.to_vec();
    words.shuffle(&mut rng);
    let shared = spec.shared_words();
    let own = spec.name_len - shared;
    Ok((0..spec.classes)
        .map(|c| {
            let start = shared + c * own;
            words[..shared]
                .iter()
                .chain(&words[start..start + own])
                .copied()
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect())
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
}

/// Builds the dataset and its class prototypes in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<(Dataset<f32>, Vec<Tensor<f32>>)> {
    let names = class_names(spec)?;
    let shape = spec.image_shape();
    let pixels = shape.iter().product::<usize>();
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    proto_rng.set_stream(2);
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| gaussian(&mut proto_rng, pixels, spec.prototype_scale))
        .collect();

    let make_split = |stream: u64, per_class: usize| -> Result<Split<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let mut images = Vec::with_capacity(spec.classes * per_class);
        let mut labels = Vec::with_capacity(spec.classes * per_class);
        for (c, proto) in prototypes.iter().enumerate() {
            for _ in 0..per_class {
                let noise = gaussian(&mut rng, pixels, 1.0);
                let data = proto
                    .iter()
                    .zip(&noise)
                    .map(|(p, n)| (p + spec.sigma_v * n) as f32)
                    .collect();
                images.push(Tensor::new(shape.to_vec(), data)?);
                labels.push(c);
            }
        }
        Split::new(images, labels)
    };
    let dataset = Dataset {
        name: spec.name.clone(),
        class_names: names,
        train: make_split(3, spec.train_per_class)?,
        test: make_split(4, spec.test_per_class)?,
    };
    let protos = prototypes
        .into_iter()
        .map(|p| Tensor::new(shape.to_vec(), p.into_iter().map(|v| v as f32).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((dataset, protos))
}

/// Generates the dataset and writes it under `dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<(DatasetManifest, Dataset<f32>)> {
    let (dataset, prototypes) = synthesize(spec)?;
    let manifest = save_dataset(&dataset, Some(spec), Some(&prototypes), dir)?;
    Ok((manifest, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_share_the_requested_prefix() {
        let spec = SyntheticSpec {
            rho: 0.67,
            ..SyntheticSpec::default()
        };
        let names = class_names(&spec).unwrap();
        assert_eq!(names.len(), 5);
        let split: Vec<Vec<&str>> = names.iter().map(|n| n.split(' ').collect()).collect();
        for s in &split {
            assert_eq!(s.len(), 3);
            assert_eq!(s[..2], split[0][..2]);
        }
        let mut last: Vec<_> = split.iter().map(|s| s[2]).collect();
        last.sort();
        last.dedup();
        assert_eq!(last.len(), 5);

        let disjoint = class_names(&SyntheticSpec::default()).unwrap();
        let mut words: Vec<&str> = disjoint.iter().flat_map(|n| n.split(' ')).collect();
        words.sort();
        words.dedup();
        assert_eq!(words.len(), 15);
    }

    #[test]
    fn full_overlap_keeps_names_distinct() {
        let spec = SyntheticSpec {
            rho: 1.0,
            ..SyntheticSpec::default()
        };
        assert_eq!(spec.shared_words(), 2);
        let mut names = class_names(&spec).unwrap();
        names.dedup();
        assert_eq!(names.len(), 5);
    }

    #[test]
    fn zero_noise_copies_the_prototype() {
        let spec = SyntheticSpec {
            sigma_v: 0.0,
            train_per_class: 3,
            test_per_class: 2,
            ..SyntheticSpec::default()
        };
        let (ds, protos) = synthesize(&spec).unwrap();
        for (img, &c) in ds.train.images.iter().zip(&ds.train.labels) {
            assert!(img.bit_eq(&protos[c]));
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = SyntheticSpec {
            train_per_class: 2,
            test_per_class: 2,
            ..SyntheticSpec::default()
        };
        let (a, _) = synthesize(&spec).unwrap();
        let (b, _) = synthesize(&spec).unwrap();
        assert_eq!(a, b);
        let (c, _) = synthesize(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train.images[0], c.train.images[0]);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec { rho: 1.5, ..SyntheticSpec::default() },
            SyntheticSpec { sigma_v: -0.1, ..SyntheticSpec::default() },
            SyntheticSpec { classes: 200, ..SyntheticSpec::default() },
        ] {
            assert!(matches!(spec.validate(), Err(Error::Config(_))));
        }
    }
}
