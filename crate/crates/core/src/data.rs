//! Datasets: IDX (MNIST container) files, a seeded synthetic oriented-bar
//! task, per-channel normalisation fitted on the train split, and a
//! nearest-centroid reference classifier.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CsaError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Labelled images, each `C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(CsaError::EmptyInput("dataset"));
        }
        if images.len() != labels.len() {
            return Err(CsaError::InvalidConfig(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let shape = images[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(CsaError::InvalidShape {
                shape,
                reason: "images must be C×H×W".into(),
            });
        }
        if let Some(bad) = images.iter().find(|t| t.shape() != shape.as_slice()) {
            return Err(CsaError::shape("dataset", &shape, bad.shape()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CsaError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n.max(1));
        self.labels.truncate(n.max(1));
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Dataset::new(
            indices.iter().map(|&i| self.images[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per-channel affine normalisation `(v - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population statistics over every pixel of every image. A channel
    /// with zero spread keeps unit scale.
    pub fn fit(data: &Dataset) -> Self {
        let c = data.image_shape()[0];
        let plane = data.image_shape()[1] * data.image_shape()[2];
        let n = (data.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        for img in &data.images {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += img.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for img in &data.images {
            for ch in 0..c {
                var[ch] += img.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn apply(&self, data: &mut Dataset) {
        for img in &mut data.images {
            let plane = img.dim(1) * img.dim(2);
            for (ch, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
    }
}

/// Normalised train/test pair.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

impl DataSplit {
    /// Fits normalisation on `train` and applies it to both splits.
    pub fn normalized(mut train: Dataset, mut test: Dataset) -> Result<Self> {
        if train.image_shape() != test.image_shape() {
            return Err(CsaError::shape("train/test images", train.image_shape(), test.image_shape()));
        }
        if train.num_classes != test.num_classes {
            return Err(CsaError::InvalidConfig("train and test class counts differ".into()));
        }
        let normalization = Normalization::fit(&train);
        normalization.apply(&mut train);
        normalization.apply(&mut test);
        Ok(DataSplit {
            train,
            test,
            normalization,
        })
    }
}

/// Oriented-bar task. Class `k` of `K` is a bright bar at angle `πk/K`
/// centred near the image centre with a uniform offset of up to `jitter`
/// pixels per axis; pixel intensity falls off as a Gaussian of the
/// perpendicular distance (scale `bar_width`) and is cut at half the bar
/// length along it. Independent Gaussian noise of standard deviation
/// `noise` is added and values are clipped to `[0, 1]`. Labels cycle
/// `0, 1, …, K-1` so every class is equally represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub size: usize,
    pub noise: f64,
    pub jitter: f64,
    pub bar_length: f64,
    pub bar_width: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 1,
            n_train: 512,
            n_test: 256,
            num_classes: 4,
            size: 16,
            noise: 0.2,
            jitter: 2.0,
            bar_length: 13.0,
            bar_width: 1.2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CsaError::InvalidConfig(format!("synthetic: {m}")));
        if self.n_train == 0 || self.n_test == 0 {
            return fail("sample counts must be positive");
        }
        if self.num_classes < 2 {
            return fail("need at least two classes");
        }
        if self.size < 4 {
            return fail("image size must be at least 4");
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0 && self.bar_length > 0.0 && self.bar_width > 0.0) {
            return fail("noise/jitter must be >= 0 and bar dimensions > 0");
        }
        Ok(())
    }

    /// Raw `[0, 1]` train and test splits.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let train = self.draw(self.n_train, &mut rng)?;
        let test = self.draw(self.n_test, &mut rng)?;
        Ok((train, test))
    }

    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let noise = Normal::new(0.0, self.noise).map_err(|e| CsaError::InvalidConfig(e.to_string()))?;
        let s = self.size;
        let centre = (s as f64 - 1.0) / 2.0;
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % self.num_classes;
            let theta = PI * label as f64 / self.num_classes as f64;
            let (sin, cos) = theta.sin_cos();
            let cx = centre + rng.gen_range(-self.jitter..=self.jitter);
            let cy = centre + rng.gen_range(-self.jitter..=self.jitter);
            let mut data = Vec::with_capacity(s * s);
            for y in 0..s {
                for x in 0..s {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let along = cos * dx + sin * dy;
                    let across = -sin * dx + cos * dy;
                    let bar = if along.abs() <= self.bar_length / 2.0 {
                        (-across * across / (2.0 * self.bar_width * self.bar_width)).exp()
                    } else {
                        0.0
                    };
                    data.push((bar + noise.sample(rng)).clamp(0.0, 1.0));
                }
            }
            images.push(Tensor::new(vec![1, s, s], data)?);
            labels.push(label);
        }
        Dataset::new(images, labels, self.num_classes)
    }
}

/// Where a [`DataSplit`] comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Directory holding the four standard MNIST IDX files.
    Idx { dir: PathBuf, num_classes: usize },
    Synthetic(SyntheticConfig),
}

impl FromStr for DataSource {
    type Err = CsaError;

    /// `synthetic` or `idx:<dir>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            Ok(DataSource::Synthetic(SyntheticConfig::default()))
        } else if let Some(dir) = s.strip_prefix("idx:") {
            if dir.is_empty() {
                return Err(CsaError::InvalidConfig("idx: needs a directory".into()));
            }
            Ok(DataSource::Idx {
                dir: PathBuf::from(dir),
                num_classes: 10,
            })
        } else {
            Err(CsaError::InvalidConfig(format!(
                "unknown dataset {s:?} (expected `synthetic` or `idx:<dir>`)"
            )))
        }
    }
}

/// Loads both splits, keeps at most `limit` samples of each, and
/// normalises with train-split statistics.
pub fn load_dataset(source: &DataSource, limit: Option<usize>) -> Result<DataSplit> {
    let (mut train, mut test) = match source {
        DataSource::Synthetic(cfg) => cfg.generate()?,
        DataSource::Idx { dir, num_classes } => (
            read_idx_pair(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS), *num_classes, limit)?,
            read_idx_pair(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS), *num_classes, limit)?,
        ),
    };
    if let Some(n) = limit {
        if n == 0 {
            return Err(CsaError::InvalidConfig("dataset limit must be positive".into()));
        }
        train.truncate(n);
        test.truncate(n);
    }
    DataSplit::normalized(train, test)
}

/// Parsed `idx3-ubyte` image file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_payload(what: &str, bytes: &[u8], header: usize, payload: usize) -> Result<()> {
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(CsaError::format(
            what,
            format!("truncated: {} bytes, header declares {expected}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(CsaError::format(
            what,
            format!("{} trailing bytes after declared payload", bytes.len() - expected),
        ));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    if bytes.len() < 16 {
        return Err(CsaError::format("idx images", "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(CsaError::format(
            "idx images",
            format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let payload = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| CsaError::format("idx images", "dimension overflow"))?;
    check_payload("idx images", bytes, 16, payload)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(CsaError::format("idx labels", "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(CsaError::format(
            "idx labels",
            format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4) as usize;
    check_payload("idx labels", bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from parsed IDX buffers, scaling pixels to `[0, 1]`.
pub fn idx_to_dataset(images: &IdxImages, labels: &[u8], num_classes: usize, limit: Option<usize>) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(CsaError::format(
            "idx pair",
            format!("{} images but {} labels", images.count, labels.len()),
        ));
    }
    let n = limit.map_or(images.count, |l| l.min(images.count));
    let plane = images.rows * images.cols;
    let tensors = (0..n)
        .map(|i| {
            let px = &images.pixels[i * plane..(i + 1) * plane];
            Tensor::new(
                vec![1, images.rows, images.cols],
                px.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(tensors, labels[..n].iter().map(|&l| l as usize).collect(), num_classes)
}

fn read_idx_pair(images: &Path, labels: &Path, num_classes: usize, limit: Option<usize>) -> Result<Dataset> {
    let img = parse_idx_images(&fs::read(images)?)?;
    let lab = parse_idx_labels(&fs::read(labels)?)?;
    idx_to_dataset(&img, &lab, num_classes, limit)
}

/// Test-set top-1 error of the classifier that assigns each image to the
/// class whose mean training image is closest in Euclidean distance.
pub fn nearest_centroid_error(train: &Dataset, test: &Dataset) -> Result<f64> {
    if train.image_shape() != test.image_shape() {
        return Err(CsaError::shape("nearest centroid", train.image_shape(), test.image_shape()));
    }
    let dim = train.images[0].len();
    let mut centroids = vec![vec![0.0; dim]; train.num_classes];
    let counts = train.class_counts();
    for (img, &l) in train.images.iter().zip(&train.labels) {
        for (c, v) in centroids[l].iter_mut().zip(img.data()) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let mut wrong = 0usize;
    for (img, &l) in test.images.iter().zip(&test.labels) {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in centroids.iter().enumerate() {
            if counts[k] == 0 {
                continue;
            }
            let d: f64 = c.iter().zip(img.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        if best.1 != l {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_header_fields() {
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|v| v as u8).collect();
        let bytes = encode_idx_images(3, 4, &pixels);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let parsed = parse_idx_images(&bytes).unwrap();
        assert_eq!((parsed.count, parsed.rows, parsed.cols), (2, 3, 4));
        assert_eq!(parsed.pixels, pixels);
        let labels = encode_idx_labels(&[1, 0]);
        assert_eq!(&labels[..4], &[0, 0, 8, 1]);
        let ds = idx_to_dataset(&parsed, &parse_idx_labels(&labels).unwrap(), 10, None).unwrap();
        assert_eq!(ds.image_shape(), &[1, 3, 4]);
        assert_eq!(ds.images[1].data()[0], 12.0 / 255.0);
    }

    #[test]
    fn idx_errors() {
        let mut bytes = encode_idx_images(2, 2, &[0; 8]);
        assert!(matches!(parse_idx_images(&bytes[..bytes.len() - 1]), Err(CsaError::Format { .. })));
        bytes[3] = 1;
        assert!(matches!(parse_idx_images(&bytes), Err(CsaError::Format { .. })));
        assert!(parse_idx_labels(&encode_idx_images(1, 1, &[0])).is_err());
        let img = parse_idx_images(&encode_idx_images(1, 1, &[0, 0])).unwrap();
        assert!(matches!(
            idx_to_dataset(&img, &[3, 10], 10, None),
            Err(CsaError::LabelOutOfRange { label: 10, classes: 10 })
        ));
        assert!(idx_to_dataset(&img, &[3], 10, None).is_err());
    }

    #[test]
    fn data_source_parsing() {
        assert!(matches!("synthetic".parse::<DataSource>(), Ok(DataSource::Synthetic(_))));
        match "idx:/data/mnist".parse::<DataSource>().unwrap() {
            DataSource::Idx { dir, num_classes } => {
                assert_eq!(dir, PathBuf::from("/data/mnist"));
                assert_eq!(num_classes, 10);
            }
            other => panic!("{other:?}"),
        }
        assert!("mnist".parse::<DataSource>().is_err());
        assert!("idx:".parse::<DataSource>().is_err());
    }

    #[test]
    fn synthetic_is_balanced_and_bounded() {
        let (train, test) = SyntheticConfig::default().generate().unwrap();
        assert_eq!(train.len(), 512);
        assert_eq!(test.len(), 256);
        assert_eq!(train.class_counts(), vec![128; 4]);
        assert!(train.images.iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
