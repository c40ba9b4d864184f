//! Datasets: MNIST IDX files and seeded synthetic Gaussian blobs.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::mechanisms::NoiseSource;
use crate::nn::LabeledExample;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found} at offset 0 (expected {expected})")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: file truncated at offset {offset}")]
    TruncatedFile { path: PathBuf, offset: usize },
    #[error("{path}: {images} images but {labels} labels (count header at offset 4)")]
    CountMismatch { path: PathBuf, images: usize, labels: usize },
    #[error("{path}: label {label} at offset {offset} exceeds 9")]
    BadLabel { path: PathBuf, label: u8, offset: usize },
    #[error("dataset invariant violated: {0}")]
    Invalid(String),
    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Immutable labeled dataset with a uniform feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    num_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>, num_classes: usize, feature_dim: usize) -> Result<Self> {
        if let Some((i, ex)) = examples
            .iter()
            .enumerate()
            .find(|(_, ex)| ex.features.len() != feature_dim || ex.label >= num_classes)
        {
            return Err(DataError::Invalid(format!(
                "example {i} has {} features and label {} (expected {feature_dim} features, < {num_classes} classes)",
                ex.features.len(),
                ex.label
            )));
        }
        if examples.iter().any(|ex| ex.features.iter().any(|v| !v.is_finite())) {
            return Err(DataError::Invalid("non-finite feature".into()));
        }
        Ok(Self {
            examples,
            num_classes,
            feature_dim,
        })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Applies `f` to every feature vector, keeping labels.
    pub fn map_features<F>(&self, new_dim: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Sync,
    {
        use rayon::prelude::*;
        let examples = self
            .examples
            .par_iter()
            .map(|ex| LabeledExample::new(f(&ex.features), ex.label))
            .collect();
        Self::new(examples, self.num_classes, new_dim)
    }

    /// First `n` examples.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            examples: self.examples.iter().take(n).cloned().collect(),
            ..*self
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes).map_err(io_err)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes).map_err(io_err)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::TruncatedFile {
            path: path.to_path_buf(),
            offset: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Images scaled from `[0, 255]` to `[0, 1]` and flattened row-major.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<Vec<f64>>, usize)> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let dim = rows * cols;
    let end = 16 + count * dim;
    if bytes.len() < end {
        return Err(DataError::TruncatedFile {
            path: path.to_path_buf(),
            offset: bytes.len(),
        });
    }
    let images = bytes[16..end]
        .chunks_exact(dim.max(1))
        .take(count)
        .map(|px| px.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect();
    Ok((images, dim))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let count = be_u32(bytes, 4, path)? as usize;
    let end = 8 + count;
    if bytes.len() < end {
        return Err(DataError::TruncatedFile {
            path: path.to_path_buf(),
            offset: bytes.len(),
        });
    }
    bytes[8..end]
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l > 9 {
                Err(DataError::BadLabel {
                    path: path.to_path_buf(),
                    label: l,
                    offset: 8 + i,
                })
            } else {
                Ok(usize::from(l))
            }
        })
        .collect()
}

/// Loads an MNIST-style image/label pair; `.gz` files are decompressed.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (images, dim) = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if images.len() != labels.len() {
        return Err(DataError::CountMismatch {
            path: labels_path.to_path_buf(),
            images: images.len(),
            labels: labels.len(),
        });
    }
    let examples = images
        .into_iter()
        .zip(labels)
        .map(|(f, l)| LabeledExample::new(f, l))
        .collect();
    Dataset::new(examples, 10, dim)
}

/// Standard MNIST file names inside `dir`, preferring uncompressed files.
pub fn mnist_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    let pick = |stem: String| {
        let plain = dir.join(&stem);
        if plain.exists() {
            plain
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    (
        pick(format!("{prefix}-images-idx3-ubyte")),
        pick(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Gaussian clusters (unit variance per coordinate) around seeded random
/// centres whose pairwise distance is at least `separation`.
pub fn synthetic_blobs(num_classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 || !(separation >= 0.0 && separation.is_finite()) {
        return Err(DataError::Domain(format!(
            "blobs need positive sizes and finite separation >= 0 (classes={num_classes}, per_class={per_class}, dim={dim}, separation={separation})"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut radius = separation.max(1e-9) * num_classes as f64;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut attempts = 0;
    while centers.len() < num_classes {
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-radius..=radius)).collect();
        let ok = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation
        });
        if ok {
            centers.push(c);
            attempts = 0;
        } else {
            attempts += 1;
            if attempts > 1000 {
                radius *= 2.0;
                attempts = 0;
            }
        }
    }
    let mut noise = NoiseSource::with_stream(seed, 1);
    let mut examples = Vec::with_capacity(num_classes * per_class);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let mut x = vec![0.0; dim];
            noise.fill_gaussian(&mut x, 1.0);
            x.iter_mut().zip(c).for_each(|(v, m)| *v += m);
            examples.push(LabeledExample::new(x, label));
        }
    }
    Dataset::new(examples, num_classes, dim)
}
