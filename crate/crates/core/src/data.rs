//! MNIST (IDX format) and synthetic datasets, with seeded minibatching.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{tags, SeededRng};
use crate::tensor::DenseMatrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DenseMatrix<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(features: DenseMatrix<f32>, labels: Vec<usize>, num_classes: usize, split: &str) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Consistency(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    /// First `n` examples (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.clamp(1, self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split.clone(),
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(bytes.len(), format!("truncated {what} header")))
}

/// Parses IDX image bytes (`0x00000803`, count x rows x cols, u8 pixels) into
/// `count x (rows*cols)` features scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<DenseMatrix<f32>> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let pixels = rows * cols;
    let end = 16 + count * pixels;
    if bytes.len() < end {
        return Err(Error::format(
            bytes.len(),
            format!("truncated image data: {count} images of {rows}x{cols} need {end} bytes"),
        ));
    }
    if bytes.len() > end {
        return Err(Error::format(end, "trailing bytes after image data"));
    }
    let data = bytes[16..end].iter().map(|&p| p as f32 / 255.0).collect();
    DenseMatrix::new(count, pixels, data).map_err(|e| Error::format(4, e.to_string()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "label")? as usize;
    let end = 8 + count;
    if bytes.len() < end {
        return Err(Error::format(bytes.len(), format!("truncated label data: expected {count} labels")));
    }
    if bytes.len() > end {
        return Err(Error::format(end, "trailing bytes after label data"));
    }
    Ok(bytes[8..end].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let features = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if features.rows() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            features.rows(),
            labels_path.display(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let split = images_path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| if n.starts_with("t10k") { "test" } else { "train" })
        .unwrap_or("train");
    Dataset::new(features, labels, classes, split)
}

/// One file of the standard MNIST distribution.
#[derive(Debug, Clone, Copy)]
pub struct MnistFile {
    pub name: &'static str,
    /// SHA-256 of the decompressed file.
    pub sha256: &'static str,
}

pub const MNIST_FILES: [MnistFile; 4] = [
    MnistFile {
        name: "train-images-idx3-ubyte",
        sha256: "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    },
    MnistFile {
        name: "train-labels-idx1-ubyte",
        sha256: "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    },
    MnistFile {
        name: "t10k-images-idx3-ubyte",
        sha256: "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    },
    MnistFile {
        name: "t10k-labels-idx1-ubyte",
        sha256: "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    },
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over a git-style blob header (`blob <len>\0`) followed by the content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Loads the MNIST train and test splits from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let path = |i: usize| dir.join(MNIST_FILES[i].name);
    let train = load_idx(&path(0), &path(1))?;
    let test = load_idx(&path(2), &path(3))?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Two Gaussian clusters six standard deviations apart.
    Blobs,
    /// Four clusters in an XOR layout.
    Xor,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Xor => "xor",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "xor" => Ok(SyntheticKind::Xor),
            other => Err(Error::Config(format!("unknown synthetic dataset {other:?}"))),
        }
    }
}

/// Cluster spread of the synthetic generators.
pub const SYNTHETIC_SIGMA: f64 = 0.05;

/// Seeded two-class dataset with `dims` features in `[0, 1]`. Only the first
/// one (blobs) or two (xor) features carry signal; the rest are noise around 0.5.
/// Classes alternate, so the set is balanced.
pub fn synthetic(kind: SyntheticKind, n: usize, dims: usize, seed: u64) -> Result<Dataset> {
    let min_dims = match kind {
        SyntheticKind::Blobs => 1,
        SyntheticKind::Xor => 2,
    };
    if n == 0 || dims < min_dims {
        return Err(Error::Config(format!("synthetic {kind} needs n > 0 and dims >= {min_dims}")));
    }
    let mut rng = SeededRng::new(seed);
    let sigma = SYNTHETIC_SIGMA;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * dims);
    for i in 0..n {
        let (label, centre): (usize, [f64; 2]) = match kind {
            SyntheticKind::Blobs => {
                let c = i % 2;
                // centres 6σ apart along the first axis
                (c, [0.5 + if c == 0 { -3.0 } else { 3.0 } * sigma, 0.5])
            }
            SyntheticKind::Xor => {
                let q = i % 4;
                let (a, b) = (q & 1, q >> 1);
                (a ^ b, [0.3 + 0.4 * a as f64, 0.3 + 0.4 * b as f64])
            }
        };
        labels.push(label);
        for d in 0..dims {
            let mean = if d < 2 { centre[d] } else { 0.5 };
            data.push((mean + sigma * rng.normal()).clamp(0.0, 1.0) as f32);
        }
    }
    Dataset::new(DenseMatrix::new(n, dims, data)?, labels, 2, "train")
}

/// Train/test pair drawn from independent seeds.
pub fn synthetic_split(kind: SyntheticKind, n_train: usize, n_test: usize, dims: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = synthetic(kind, n_train, dims, SeededRng::derive(seed, tags::SYNTHETIC_TRAIN))?;
    let mut test = synthetic(kind, n_test, dims, SeededRng::derive(seed, tags::SYNTHETIC_TEST))?;
    test.split = "test".into();
    Ok((train, test))
}

/// Seeded permutation split into minibatches; the final partial batch is kept.
pub fn batches(len: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    SeededRng::new(epoch_seed).shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Shuffle seed for one epoch of a run.
pub fn epoch_seed(run_seed: u64, epoch: usize) -> u64 {
    SeededRng::derive(run_seed ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03), tags::SHUFFLE)
}
