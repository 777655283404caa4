//! Image datasets: MNIST (IDX), CIFAR-10/100 (binary batches) and seeded
//! synthetic Gaussian blobs.
//!
//! Expected directory layout under a data root:
//!
//! ```text
//! <root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte
//! <root>/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
//! <root>/cifar-100-binary/{train,test}.bin
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Self {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn cifar() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::dim(format!("images must be N x C x H x W, got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::param(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    fn sample_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Applies per-channel normalization once. Returns `false` (and leaves the
    /// data untouched) if the same statistics were already applied.
    pub fn normalize(&mut self, norm: &Normalization) -> Result<bool> {
        if let Some(existing) = &self.normalization {
            if existing == norm {
                return Ok(false);
            }
            return Err(Error::Usage("dataset already normalized with different statistics".into()));
        }
        let channels = self.images.shape()[1];
        if norm.mean.len() != channels || norm.std.len() != channels {
            return Err(Error::dim(format!(
                "normalization has {} channels, images have {channels}",
                norm.mean.len()
            )));
        }
        let plane = self.images.shape()[2] * self.images.shape()[3];
        for sample in self.images.data_mut().chunks_mut(channels * plane) {
            for (c, chan) in sample.chunks_mut(plane).enumerate() {
                for v in chan {
                    *v = (*v - norm.mean[c]) / norm.std[c];
                }
            }
        }
        self.normalization = Some(norm.clone());
        Ok(true)
    }

    /// Copies the selected samples into a batch tensor plus labels.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let len = self.sample_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend(src[i * len..(i + 1) * len].iter().map(|&v| T::from_f32(v).expect("f32")));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.images.shape()[1..]);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("sized above"), labels)
    }

    /// New dataset holding the selected samples (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::param("subset must not be empty"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::param(format!("index {bad} out of range for {} samples", self.len())));
        }
        let (images, labels) = self.batch::<f32>(indices);
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
            normalization: self.normalization.clone(),
        })
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn format_err(file: &str, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_string(),
        offset,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, file: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(file, offset as u64, "truncated header"))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(file, 0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(format_err(
            file,
            bytes.len().min(need) as u64,
            format!("expected {need} bytes for {n} images of {rows}x{cols}, file has {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(file, 0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(
            file,
            bytes.len().min(8 + n) as u64,
            format!("expected {} bytes for {n} labels, file has {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

fn mnist_split(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let img_name = format!("{prefix}-images-idx3-ubyte");
    let lbl_name = format!("{prefix}-labels-idx1-ubyte");
    let (n, rows, cols, pixels) = parse_idx_images(&read(&dir.join(&img_name))?, &img_name)?;
    let labels = parse_idx_labels(&read(&dir.join(&lbl_name))?, &lbl_name)?;
    if labels.len() != n {
        return Err(format_err(&lbl_name, 4, format!("{} labels for {n} images", labels.len())));
    }
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(format_err(&lbl_name, 8 + pos as u64, format!("label {} out of range", labels[pos])));
    }
    let images = Tensor::new(
        vec![n, 1, rows, cols],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )?;
    let mut ds = Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), 10, split)?;
    ds.normalize(&Normalization::mnist())?;
    Ok(ds)
}

/// Loads the canonical MNIST IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        mnist_split(dir, "train", Split::Train)?,
        mnist_split(dir, "t10k", Split::Test)?,
    ))
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Decodes CIFAR binary records. `label_bytes` is 1 for CIFAR-10 and 2 for
/// CIFAR-100 (coarse, fine); the last label byte is used.
fn parse_cifar(bytes: &[u8], file: &str, label_bytes: usize, classes: usize) -> Result<(Vec<f32>, Vec<usize>)> {
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(format_err(
            file,
            (bytes.len() / record * record) as u64,
            format!("length {} is not a multiple of the {record}-byte record size", bytes.len()),
        ));
    }
    let n = bytes.len() / record;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(format_err(
                file,
                (i * record + label_bytes - 1) as u64,
                format!("label {label} out of range for {classes} classes"),
            ));
        }
        labels.push(label);
        pixels.extend(rec[label_bytes..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn parse_cifar10(bytes: &[u8], file: &str) -> Result<(Vec<f32>, Vec<usize>)> {
    parse_cifar(bytes, file, 1, 10)
}

pub fn parse_cifar100(bytes: &[u8], file: &str) -> Result<(Vec<f32>, Vec<usize>)> {
    parse_cifar(bytes, file, 2, 100)
}

fn cifar_dataset(
    dir: &Path,
    files: &[String],
    split: Split,
    classes: usize,
    parse: fn(&[u8], &str) -> Result<(Vec<f32>, Vec<usize>)>,
) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let (p, l) = parse(&read(&dir.join(name))?, name)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    let mut ds = Dataset::new(images, labels, classes, split)?;
    ds.normalize(&Normalization::cifar())?;
    Ok(ds)
}

pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    Ok((
        cifar_dataset(dir, &train, Split::Train, 10, parse_cifar10)?,
        cifar_dataset(dir, &["test_batch.bin".into()], Split::Test, 10, parse_cifar10)?,
    ))
}

pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        cifar_dataset(dir, &["train.bin".into()], Split::Train, 100, parse_cifar100)?,
        cifar_dataset(dir, &["test.bin".into()], Split::Test, 100, parse_cifar100)?,
    ))
}

/// Data root: `$FMLSIM_DATA_DIR`, falling back to `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os("FMLSIM_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub const MNIST_DIR: &str = "mnist";
pub const CIFAR10_DIR: &str = "cifar-10-batches-bin";
pub const CIFAR100_DIR: &str = "cifar-100-binary";

/// Class-conditional Gaussian blobs: class `c` has prototype
/// `separation * N(0, I)` and samples are `prototype + spread * N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: usize,
    /// `[C, H, W]` per sample.
    pub sample_shape: Vec<usize>,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Shifts which prototypes are used, so two specs with the same seed and
    /// disjoint offsets describe disjoint class sets of one generator.
    #[serde(default)]
    pub class_offset: usize,
    /// When set, prototypes are `separation * A z / sqrt(r)` for a basis `A`
    /// shared by every class offset and per-class `z ~ N(0, I_r)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
}

fn default_spread() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    1.0
}

const STREAM_PROTOTYPE: u64 = 0x5000_0000;
const STREAM_BASIS: u64 = 0x4000_0000;
const STREAM_TRAIN: u64 = 0x6000_0001;
const STREAM_TEST: u64 = 0x6000_0002;

impl SynthSpec {
    pub fn vector(seed: u64, classes: usize, dim: usize) -> Self {
        Self {
            seed,
            classes,
            sample_shape: vec![1, 1, dim],
            spread: default_spread(),
            separation: default_separation(),
            class_offset: 0,
            latent_dim: None,
        }
    }

    fn basis(&self) -> Option<Vec<f64>> {
        let r = self.latent_dim?;
        let len: usize = self.sample_shape.iter().product();
        let mut rng = rng::stream(self.seed, STREAM_BASIS);
        Some((0..len * r).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    fn prototype(&self, class: usize, basis: Option<&[f64]>) -> Vec<f32> {
        let len: usize = self.sample_shape.iter().product();
        let mut rng = rng::stream(self.seed, STREAM_PROTOTYPE + (self.class_offset + class) as u64);
        match (basis, self.latent_dim) {
            (Some(a), Some(r)) => {
                let z: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
                let scale = self.separation / (r as f64).sqrt();
                a.chunks(r)
                    .map(|row| (scale * row.iter().zip(&z).map(|(a, z)| a * z).sum::<f64>()) as f32)
                    .collect()
            }
            _ => (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (self.separation * z) as f32
                })
                .collect(),
        }
    }

    /// `n` samples with labels cycling `0, 1, .., classes - 1`.
    pub fn generate(&self, n: usize, split: Split) -> Result<Dataset> {
        if self.classes < 2 {
            return Err(Error::param("synthetic data needs at least 2 classes"));
        }
        if n < self.classes {
            return Err(Error::param(format!("need n >= classes, got n={n}, classes={}", self.classes)));
        }
        if self.sample_shape.len() != 3 {
            return Err(Error::dim(format!("sample shape must be [C, H, W], got {:?}", self.sample_shape)));
        }
        if self.latent_dim == Some(0) {
            return Err(Error::param("latent_dim must be at least 1"));
        }
        let basis = self.basis();
        let protos: Vec<Vec<f32>> = (0..self.classes).map(|c| self.prototype(c, basis.as_deref())).collect();
        let tag = match split {
            Split::Train => STREAM_TRAIN,
            Split::Test => STREAM_TEST,
        };
        let mut rng = rng::stream(self.seed ^ (self.class_offset as u64).rotate_left(32), tag);
        let len = protos[0].len();
        let mut data = Vec::with_capacity(n * len);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % self.classes;
            labels.push(c);
            for &m in &protos[c] {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + (self.spread * z) as f32);
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.sample_shape);
        Dataset::new(Tensor::new(shape, data)?, labels, self.classes, split)
    }

    pub fn train_test(&self, train: usize, test: usize) -> Result<(Dataset, Dataset)> {
        Ok((self.generate(train, Split::Train)?, self.generate(test, Split::Test)?))
    }
}

/// Synthetic vector dataset of `n` samples in `dim` dimensions.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, dim: usize) -> Result<Dataset> {
    SynthSpec::vector(seed, classes, dim).generate(n, Split::Train)
}
