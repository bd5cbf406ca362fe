//! Labeled datasets: synthetic mixtures, MNIST-style IDX files, class
//! downsampling and epoch batching.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};
use crate::numerics::{Matrix, RandomStream};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        crate::losses::check_batch(&features, &labels, classes)?;
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// CSV with header `f0,…,f{d-1},label`, one sample per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for (row, y) in self.features.iter_rows().zip(&self.labels) {
            for v in row {
                out.push_str(&v.to_string());
                out.push(',');
            }
            out.push_str(&y.to_string());
            out.push('\n');
        }
        out
    }
}

/// Isotropic Gaussian clusters whose means sit evenly on a circle of
/// `radius` in the first two coordinates (remaining coordinates zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub classes: usize,
    pub per_class: Vec<usize>,
    pub dim: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("classes", "need at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::invalid("dim", "need at least 2 dimensions"));
        }
        if self.per_class.len() != self.classes {
            return Err(Error::invalid(
                "per_class",
                format!("{} counts for {} classes", self.per_class.len(), self.classes),
            ));
        }
        if self.per_class.iter().sum::<usize>() == 0 {
            return Err(Error::invalid("per_class", "mixture would be empty"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("must be >= 0, got {}", self.sigma)));
        }
        if !self.radius.is_finite() {
            return Err(Error::invalid("radius", "must be finite"));
        }
        Ok(())
    }

    pub fn mean(&self, class: usize) -> Vec<f64> {
        let phi = 2.0 * std::f64::consts::PI * class as f64 / self.classes as f64;
        let mut m = vec![0.0; self.dim];
        m[0] = self.radius * phi.cos();
        m[1] = self.radius * phi.sin();
        m
    }
}

/// Samples are emitted class by class. `sigma = 0` gives point clusters
/// exactly at the means.
pub fn gen_gaussian_mixture(spec: &MixtureSpec, stream: &mut RandomStream) -> Result<LabeledDataset> {
    spec.validate()?;
    let n: usize = spec.per_class.iter().sum();
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, &count) in spec.per_class.iter().enumerate() {
        let mean = spec.mean(k);
        for _ in 0..count {
            data.extend(mean.iter().map(|m| m + spec.sigma * stream.normal()));
            labels.push(k);
        }
    }
    LabeledDataset::new(Matrix::new(n, spec.dim, data)?, labels, spec.classes)
}

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            available: bytes.len(),
        })
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, &[u8]), IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(IdxError::BadMagic {
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok((count, rows, cols, &bytes[16..needed]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<&[u8], IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(IdxError::BadMagic {
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(&bytes[8..needed])
}

/// Builds a dataset from in-memory IDX image and label files. Pixels are
/// scaled to `[0, 1]`; the class count is one past the largest label.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let raw_labels = parse_idx_labels(labels)?;
    if raw_labels.len() != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: raw_labels.len(),
        }
        .into());
    }
    let features = Matrix::new(count, rows * cols, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(features, labels, classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode_idx(&images, &labels)
}

/// Encodes `(rows × cols)` byte images and labels as IDX files.
pub fn encode_idx(rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let count = labels.len();
    assert_eq!(pixels.len(), count * rows * cols, "pixel buffer size");
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + count);
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(count as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Per-class downsampling overrides; classes not listed keep every sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub keep: Vec<(usize, usize)>,
}

/// Keeps a uniformly random subset of the requested size for each
/// overridden class. Surviving samples keep their original relative order.
pub fn apply_imbalance(ds: &LabeledDataset, spec: &ImbalanceSpec, stream: &mut RandomStream) -> Result<LabeledDataset> {
    if spec.keep.is_empty() {
        return Ok(ds.clone());
    }
    let counts = ds.class_counts();
    let mut quota: Vec<Option<usize>> = vec![None; ds.classes];
    for &(class, keep) in &spec.keep {
        if class >= ds.classes {
            return Err(Error::invalid("imbalance", format!("class {class} is out of range")));
        }
        if keep == 0 || keep > counts[class] {
            return Err(Error::invalid(
                "imbalance",
                format!("class {class}: keep {keep} of {} available", counts[class]),
            ));
        }
        quota[class] = Some(keep);
    }
    let mut keep_mask = vec![true; ds.len()];
    for (class, q) in quota.iter().enumerate() {
        let Some(q) = *q else { continue };
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        stream.shuffle(&mut members);
        for &i in &members[q..] {
            keep_mask[i] = false;
        }
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep_mask[i]).collect();
    Ok(ds.subset(&idx))
}

/// One epoch: a random permutation of `0..n` cut into batches of
/// `batch_size`, the last batch possibly shorter.
pub fn sample_batches(n: usize, batch_size: usize, stream: &mut RandomStream) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture(per_class: Vec<usize>, sigma: f64) -> MixtureSpec {
        MixtureSpec {
            classes: per_class.len(),
            per_class,
            dim: 3,
            radius: 2.0,
            sigma,
        }
    }

    #[test]
    fn zero_noise_is_exact_means() {
        let spec = mixture(vec![3, 2], 0.0);
        let ds = gen_gaussian_mixture(&spec, &mut RandomStream::new(1)).unwrap();
        for (row, &y) in ds.features.iter_rows().zip(&ds.labels) {
            assert_eq!(row, spec.mean(y).as_slice());
        }
        assert!((spec.mean(1)[0] + 2.0).abs() < 1e-15);
        assert!(spec.mean(1)[1].abs() < 1e-15);
    }

    #[test]
    fn mixture_deterministic() {
        let spec = mixture(vec![100, 100], 0.5);
        let a = gen_gaussian_mixture(&spec, &mut RandomStream::new(9)).unwrap();
        let b = gen_gaussian_mixture(&spec, &mut RandomStream::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_validation() {
        let mut spec = mixture(vec![1, 1], 1.0);
        spec.per_class = vec![1];
        assert!(spec.validate().is_err());
        let mut spec = mixture(vec![1, 1], 1.0);
        spec.dim = 1;
        assert!(spec.validate().is_err());
        assert!(mixture(vec![1], 1.0).validate().is_err());
        assert!(mixture(vec![1, 1], -1.0).validate().is_err());
    }

    #[test]
    fn idx_hand_built_bytes() {
        let mut img = Vec::new();
        for v in [0x0000_0803u32, 1, 1, 1] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.push(0xFF);
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&1u32.to_be_bytes());
        lab.push(7);
        let ds = decode_idx(&img, &lab).unwrap();
        assert_eq!(ds.features.data(), &[1.0]);
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.classes, 8);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let (img, lab) = encode_idx(2, 2, &[0, 1, 2, 3, 4, 5, 6, 7], &[0, 1]);
        let mut bad = img.clone();
        bad[3] = 0x01;
        assert!(matches!(
            decode_idx(&bad, &lab),
            Err(Error::Idx(IdxError::BadMagic { found: 0x0801, .. }))
        ));
        assert!(matches!(
            decode_idx(&img[..img.len() - 1], &lab),
            Err(Error::Idx(IdxError::Truncated { .. }))
        ));
        assert!(matches!(decode_idx(&img[..6], &lab), Err(Error::Idx(IdxError::Truncated { .. }))));
        let (_, lab3) = encode_idx(2, 2, &[0; 12], &[0, 1, 2]);
        assert!(matches!(
            decode_idx(&img, &lab3),
            Err(Error::Idx(IdxError::CountMismatch { images: 2, labels: 3 }))
        ));
        assert!(matches!(decode_idx(&img, &img), Err(Error::Idx(IdxError::BadMagic { .. }))));
    }

    #[test]
    fn idx_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..3 * 4 * 5).map(|v| (v * 7 % 256) as u8).collect();
        let (img, lab) = encode_idx(4, 5, &pixels, &[3, 0, 9]);
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.features.shape(), (3, 20));
        let back: Vec<u8> = ds.features.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, pixels);
        assert_eq!(ds.labels, vec![3, 0, 9]);
        assert!(matches!(load_idx(&dir.path().join("missing"), &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn imbalance_keeps_requested_counts() {
        let spec = mixture(vec![20, 15, 10], 1.0);
        let ds = gen_gaussian_mixture(&spec, &mut RandomStream::new(2)).unwrap();
        let imb = ImbalanceSpec { keep: vec![(1, 4)] };
        let out = apply_imbalance(&ds, &imb, &mut RandomStream::new(3)).unwrap();
        assert_eq!(out.class_counts(), vec![20, 4, 10]);
        // every feature row survives unchanged from the source
        for row in out.features.iter_rows() {
            assert!(ds.features.iter_rows().any(|r| r == row));
        }
        assert_eq!(apply_imbalance(&ds, &ImbalanceSpec::default(), &mut RandomStream::new(3)).unwrap(), ds);
        let full = ImbalanceSpec { keep: vec![(2, 10)] };
        assert_eq!(apply_imbalance(&ds, &full, &mut RandomStream::new(3)).unwrap(), ds);
        for bad in [(1, 0), (1, 16), (5, 1)] {
            assert!(apply_imbalance(&ds, &ImbalanceSpec { keep: vec![bad] }, &mut RandomStream::new(3)).is_err());
        }
    }

    #[test]
    fn batches_partition_indices() {
        let b = sample_batches(10, 3, &mut RandomStream::new(4)).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, sample_batches(10, 3, &mut RandomStream::new(4)).unwrap());
        assert!(sample_batches(10, 0, &mut RandomStream::new(4)).is_err());
    }

    #[test]
    fn csv_export() {
        let ds = LabeledDataset::new(Matrix::from_rows(&[[0.5, -1.0]]).unwrap(), vec![1], 2).unwrap();
        assert_eq!(ds.to_csv(), "f0,f1,label\n0.5,-1,1\n");
    }
}
