//! On-disk datasets: `manifest.json` next to PFTENSOR image and label files,
//! each guarded by a SHA-256 checksum.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::pftensor;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub count: usize,
    pub images: FileRef,
    pub labels: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    pub class_names: Vec<String>,
    /// `[H, W, C]`.
    pub image_shape: Vec<usize>,
    pub train: SplitFiles,
    pub test: SplitFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototypes: Option<FileRef>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_tensor(dir: &Path, file: &str, t: &Tensor<f32>) -> Result<FileRef> {
    let bytes = pftensor::encode(t);
    let path = dir.join(file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileRef {
        file: file.to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn read_tensor(dir: &Path, r: &FileRef) -> Result<Tensor<f32>> {
    let path = dir.join(&r.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let actual = sha256_hex(&bytes);
    if actual != r.sha256 {
        return Err(Error::Integrity(format!(
            "checksum mismatch for {}: manifest {}, file {actual}",
            path.display(),
            r.sha256
        )));
    }
    pftensor::decode(&bytes)
}

fn stack(images: &[Tensor<f32>], shape: &[usize]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * shape.iter().product::<usize>());
    for img in images {
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

fn write_split(dir: &Path, which: &str, split: &Split<f32>, shape: &[usize]) -> Result<SplitFiles> {
    if split.is_empty() {
        return Err(Error::Data(format!("{which} split is empty")));
    }
    let labels = Tensor::new(vec![split.len()], split.labels.iter().map(|&l| l as f32).collect())?;
    Ok(SplitFiles {
        count: split.len(),
        images: write_tensor(dir, &format!("{which}_images.pft"), &stack(&split.images, shape)?)?,
        labels: write_tensor(dir, &format!("{which}_labels.pft"), &labels)?,
    })
}

fn read_split(dir: &Path, which: &str, files: &SplitFiles, shape: &[usize], k: usize) -> Result<Split<f32>> {
    let images = read_tensor(dir, &files.images)?;
    let labels = read_tensor(dir, &files.labels)?;
    let mut expected = vec![files.count];
    expected.extend_from_slice(shape);
    if images.shape() != expected.as_slice() {
        return Err(Error::Data(format!(
            "{which} images have shape {:?}, manifest says {expected:?}",
            images.shape()
        )));
    }
    if labels.shape() != [files.count] {
        return Err(Error::Data(format!(
            "{which} labels have shape {:?}, manifest says [{}]",
            labels.shape(),
            files.count
        )));
    }
    let labels = labels
        .data()
        .iter()
        .map(|&l| {
            if l.fract() != 0.0 || l < 0.0 || l as usize >= k {
                Err(Error::Data(format!("{which} label {l} is not a class index below {k}")))
            } else {
                Ok(l as usize)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let per = shape.iter().product::<usize>();
    let images = images
        .data()
        .chunks_exact(per)
        .map(|c| Tensor::new(shape.to_vec(), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Split::new(images, labels)
}

/// Writes `dataset` under `dir` and returns the manifest that was stored.
pub fn save_dataset(
    dataset: &Dataset<f32>,
    generator: Option<&SyntheticSpec>,
    prototypes: Option<&[Tensor<f32>]>,
    dir: &Path,
) -> Result<DatasetManifest> {
    dataset.validate()?;
    let shape = dataset
        .train
        .images
        .first()
        .ok_or_else(|| Error::Data("train split is empty".into()))?
        .shape()
        .to_vec();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        name: dataset.name.clone(),
        class_names: dataset.class_names.clone(),
        train: write_split(dir, "train", &dataset.train, &shape)?,
        test: write_split(dir, "test", &dataset.test, &shape)?,
        generator: generator.cloned(),
        prototypes: prototypes
            .map(|p| write_tensor(dir, "prototypes.pft", &stack(p, &shape)?))
            .transpose()?,
        image_shape: shape,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a dataset from its manifest file or the directory holding it.
pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Dataset<f32>)> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "unsupported manifest schema version {}",
            manifest.schema_version
        )));
    }
    if manifest.image_shape.len() != 3 {
        return Err(Error::Data(format!(
            "image_shape must be [H, W, C], got {:?}",
            manifest.image_shape
        )));
    }
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let k = manifest.class_names.len();
    let dataset = Dataset {
        name: manifest.name.clone(),
        class_names: manifest.class_names.clone(),
        train: read_split(dir, "train", &manifest.train, &manifest.image_shape, k)?,
        test: read_split(dir, "test", &manifest.test, &manifest.image_shape, k)?,
    };
    dataset.validate()?;
    Ok((manifest, dataset))
}

/// Prototype images stored alongside a synthetic dataset.
pub fn load_prototypes(dir: &Path, manifest: &DatasetManifest) -> Result<Option<Vec<Tensor<f32>>>> {
    let Some(r) = &manifest.prototypes else {
        return Ok(None);
    };
    let t = read_tensor(dir, r)?;
    let per = manifest.image_shape.iter().product::<usize>();
    t.data()
        .chunks_exact(per)
        .map(|c| Tensor::new(manifest.image_shape.clone(), c.to_vec()))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_per_class: 3,
            test_per_class: 2,
            image_size: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (m, ds) = generate_synthetic(&small(), dir.path()).unwrap();
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back.class_names.len(), 5);
        for (a, b) in ds.train.images.iter().zip(&back.train.images) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(ds.test.labels, back.test.labels);
        let protos = load_prototypes(dir.path(), &m2).unwrap().unwrap();
        assert_eq!(protos.len(), 5);
    }

    #[test]
    fn identical_specs_give_identical_checksums() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (ma, _) = generate_synthetic(&small(), a.path()).unwrap();
        let (mb, _) = generate_synthetic(&small(), b.path()).unwrap();
        assert_eq!(ma.train, mb.train);
        assert_eq!(ma.test, mb.test);
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small(), dir.path()).unwrap();
        let path = dir.path().join("train_images.pft");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn shape_mismatch_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&small(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m.image_shape = vec![4, 16, 1];
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }
}
