//! Datasets: MNIST IDX ingestion and a seeded synthetic template dataset.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{what}: wrong IDX magic {found:#010x}, expected {expected:#010x}")]
    WrongMagic { what: &'static str, expected: u32, found: u32 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0}: file is truncated")]
    Truncated(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// In-memory dataset of `channels × size × size` images.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pixels: Vec<f64>,
    labels: Vec<usize>,
    pub channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Standardization applied to raw pixel values (identity for synthetic data).
    pub mean: f64,
    pub std: f64,
}

impl DatasetHandle {
    pub fn new(
        pixels: Vec<f64>,
        labels: Vec<usize>,
        channels: usize,
        image_size: usize,
        num_classes: usize,
    ) -> Result<Self, DatasetError> {
        let per = channels * image_size * image_size;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(DatasetError::CountMismatch {
                images: if per == 0 { 0 } else { pixels.len() / per },
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DatasetError::LabelRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            pixels,
            labels,
            channels,
            image_size,
            num_classes,
            mean: 0.0,
            std: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(
            &[self.channels, self.image_size, self.image_size],
            self.pixels(i).to_vec(),
        )
        .expect("dataset image shape")
    }

    pub fn batch(&self, indices: &[usize]) -> (Vec<Tensor>, Vec<usize>) {
        (
            indices.iter().map(|&i| self.image(i)).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let mut out = self.clone();
        out.pixels.truncate(n * self.image_len());
        out.labels.truncate(n);
        out
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, DatasetError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DatasetError::Truncated(what))
}

/// Parsed IDX image file: `(count, rows, cols, raw bytes)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), DatasetError> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::WrongMagic {
            what: "images",
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    if body.len() < count * rows * cols {
        return Err(DatasetError::Truncated("images"));
    }
    Ok((count, rows, cols, &body[..count * rows * cols]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], DatasetError> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::WrongMagic {
            what: "labels",
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DatasetError::Truncated("labels"));
    }
    Ok(&body[..count])
}

/// Builds a standardized MNIST-style dataset from in-memory IDX files.
pub fn mnist_from_bytes(
    image_bytes: &[u8],
    label_bytes: &[u8],
    limit: Option<usize>,
) -> Result<DatasetHandle, DatasetError> {
    let (count, rows, cols, raw) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != count {
        return Err(DatasetError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    if rows != cols {
        return Err(DatasetError::Spec(format!("non-square images {rows}×{cols}")));
    }
    let keep = limit.map_or(count, |l| l.min(count));
    let pixels = raw[..keep * rows * cols]
        .iter()
        .map(|&b| (b as f64 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    let labels: Vec<usize> = labels[..keep].iter().map(|&l| l as usize).collect();
    let mut ds = DatasetHandle::new(pixels, labels, 1, rows, 10)?;
    ds.mean = MNIST_MEAN;
    ds.std = MNIST_STD;
    Ok(ds)
}

pub fn ingest_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<DatasetHandle, DatasetError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| DatasetError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    mnist_from_bytes(&images, &labels, limit)
}

fn default_noise() -> f64 {
    0.3
}

fn default_channels() -> usize {
    1
}

/// Per-class random templates plus Gaussian pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Seeds the class templates.
    pub seed: u64,
    /// Seeds the per-sample noise; defaults to `seed`. Use a different value
    /// to draw a held-out split over the same templates.
    #[serde(default)]
    pub sample_seed: Option<u64>,
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, classes: usize, samples_per_class: usize, image_size: usize) -> Self {
        Self {
            seed,
            sample_seed: None,
            classes,
            samples_per_class,
            image_size,
            channels: 1,
            noise: default_noise(),
        }
    }

    pub fn templates(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let per = self.channels * self.image_size * self.image_size;
        (0..self.classes)
            .map(|_| (0..per).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    /// Samples are interleaved by class: sample `i` has label `i % classes`.
    pub fn generate(&self) -> Result<DatasetHandle, DatasetError> {
        if self.classes < 2 {
            return Err(DatasetError::Spec("synthetic data needs at least 2 classes".into()));
        }
        if self.samples_per_class == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(DatasetError::Empty);
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DatasetError::Spec(format!("noise must be non-negative, got {}", self.noise)));
        }
        let templates = self.templates();
        let seed = self.sample_seed.unwrap_or(self.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
        let count = self.classes * self.samples_per_class;
        let mut pixels = Vec::with_capacity(count * templates[0].len());
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let c = i % self.classes;
            if self.noise == 0.0 {
                pixels.extend_from_slice(&templates[c]);
            } else {
                let noise = Normal::new(0.0, self.noise).expect("valid noise");
                pixels.extend(templates[c].iter().map(|&t| t + noise.sample(&mut rng)));
            }
            labels.push(c);
        }
        DatasetHandle::new(pixels, labels, self.channels, self.image_size, self.classes)
    }
}

/// Default-noise (σ = 0.3) synthetic dataset.
pub fn synth_dataset(
    seed: u64,
    classes: usize,
    samples_per_class: usize,
    image_size: usize,
) -> Result<DatasetHandle, DatasetError> {
    SynthSpec::new(seed, classes, samples_per_class, image_size).generate()
}

/// Where a dataset comes from; serialized with a `source` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SynthSpec),
    MnistIdx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<DatasetHandle, DatasetError> {
        match self {
            Self::Synthetic(s) => s.generate(),
            Self::MnistIdx { images, labels, limit } => ingest_mnist_idx(images, labels, *limit),
        }
    }
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn header_parse() {
        let bytes = idx_images(3, 28, 28, 0);
        let (count, rows, cols, body) = parse_idx_images(&bytes).unwrap();
        assert_eq!((count, rows, cols, body.len()), (3, 28, 28, 3 * 784));
    }

    #[test]
    fn sixty_thousand_header_reads_counts() {
        let mut header = Vec::new();
        for x in [IDX_IMAGES_MAGIC, 60_000, 28, 28] {
            header.extend_from_slice(&x.to_be_bytes());
        }
        assert_eq!(be_u32(&header, 4, "images").unwrap(), 60_000);
        assert!(matches!(parse_idx_images(&header), Err(DatasetError::Truncated(_))));
    }

    #[test]
    fn labels_with_image_magic_rejected() {
        let mut bad = idx_labels(&[1, 2]);
        bad[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        assert!(matches!(
            parse_idx_labels(&bad),
            Err(DatasetError::WrongMagic { what: "labels", .. })
        ));
    }

    #[test]
    fn standardization_of_full_intensity() {
        let ds = mnist_from_bytes(&idx_images(1, 2, 2, 255), &idx_labels(&[7]), None).unwrap();
        let expected = (1.0 - 0.1307) / 0.3081;
        assert!((ds.pixels(0)[0] - expected).abs() < 1e-12);
        assert!((expected - 2.8215).abs() < 1e-4);
        assert_eq!(ds.label(0), 7);
    }

    #[test]
    fn count_mismatch() {
        let err = mnist_from_bytes(&idx_images(2, 2, 2, 1), &idx_labels(&[1]), None).unwrap_err();
        assert!(matches!(err, DatasetError::CountMismatch { images: 2, labels: 1 }));
    }

    #[test]
    fn synthetic_is_deterministic_and_seed_dependent() {
        let a = synth_dataset(3, 4, 5, 6).unwrap();
        let b = synth_dataset(3, 4, 5, 6).unwrap();
        let c = synth_dataset(4, 4, 5, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 20);
        assert_eq!(a.labels()[..4], [0, 1, 2, 3]);
        assert!(synth_dataset(3, 1, 5, 6).is_err());
    }

    #[test]
    fn noiseless_synthetic_is_nearest_template_separable() {
        let mut spec = SynthSpec::new(11, 5, 8, 6);
        spec.noise = 0.0;
        let ds = spec.generate().unwrap();
        let templates = spec.templates();
        for i in 0..ds.len() {
            let px = ds.pixels(i);
            let best = (0..templates.len())
                .min_by(|&a, &b| {
                    let da: f64 = px.iter().zip(&templates[a]).map(|(x, t)| (x - t).powi(2)).sum();
                    let db: f64 = px.iter().zip(&templates[b]).map(|(x, t)| (x - t).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(best, ds.label(i));
        }
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = permutation(50, 9);
        assert_ne!(p, (0..50).collect::<Vec<_>>());
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
