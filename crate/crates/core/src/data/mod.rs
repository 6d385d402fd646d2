//! Datasets: in-memory splits, on-disk manifests, the synthetic generator
//! and domain-shift variants.

mod manifest;
pub mod shift;
pub mod synthetic;
pub mod words;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use manifest::{load_dataset, load_prototypes, save_dataset, DatasetManifest, FileRef, SplitFiles, MANIFEST_FILE};
pub use synthetic::{class_names, generate_synthetic, synthesize, SyntheticSpec};

/// Images `[H, W, C]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<S> {
    pub images: Vec<Tensor<S>>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> Split<S> {
    pub fn new(images: Vec<Tensor<S>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::Data(format!(
                    "image shapes differ within a split: {:?} and {:?}",
                    first.shape(),
                    bad.shape()
                )));
            }
        }
        Ok(Split { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Split<S> {
        Split {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Split<T> {
        Split {
            images: self.images.iter().map(|t| t.cast()).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Indices of the samples with label `c`, in storage order.
    pub fn indices_of(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub name: String,
    pub class_names: Vec<String>,
    pub train: Split<S>,
    pub test: Split<S>,
}

impl<S: Scalar> Dataset<S> {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            name: self.name.clone(),
            class_names: self.class_names.clone(),
            train: self.train.cast(),
            test: self.test.cast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k == 0 {
            return Err(Error::Data(format!("dataset {} has no classes", self.name)));
        }
        for (which, split) in [("train", &self.train), ("test", &self.test)] {
            if let Some(&bad) = split.labels.iter().find(|&&l| l >= k) {
                return Err(Error::Data(format!("{which} label {bad} is not below k = {k}")));
            }
        }
        Ok(())
    }
}
