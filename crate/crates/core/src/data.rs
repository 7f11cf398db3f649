//! Datasets: CIFAR binary files, a seeded synthetic prototype task, and the
//! preprocessing applied to every batch.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N × C × H × W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            images,
            labels,
            num_classes,
            split: split.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.images.shape();
        if shape.len() != 4 || shape[0] != self.labels.len() {
            return Err(Error::dim("dataset", shape, &[self.labels.len(), 0, 0, 0]));
        }
        if self.labels.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Format(format!("label {bad} outside [0, {})", self.num_classes)));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("image values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gathers the listed samples into a `[B × C × H × W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Internal(format!("sample {i} out of range {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_size(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Decodes one record into `pixels` and returns its label (the fine label for CIFAR-100).
fn decode_record(rec: &[u8], variant: CifarVariant, pixels: &mut Vec<f32>) -> usize {
    let offset = variant.record_size() - CIFAR_PIXELS;
    pixels.extend(rec[offset..].iter().map(|&b| b as f32 / 255.0));
    rec[offset - 1] as usize
}

fn size_error(path: &Path, variant: CifarVariant, actual: u64) -> Error {
    let rs = variant.record_size() as u64;
    let expected = (actual / rs).max(1) * rs;
    Error::Format(format!(
        "{}: expected a multiple of {rs} bytes (e.g. {expected}), got {actual} bytes",
        path.display()
    ))
}

fn finish(path: &Path, variant: CifarVariant, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Dataset> {
    let n = labels.len();
    let split = path
        .file_stem()
        .map_or("cifar".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?,
        labels,
        variant.num_classes(),
        split,
    )
}

/// Parses a whole CIFAR binary file held in memory.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, path: &Path) -> Result<Dataset> {
    let rs = variant.record_size();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rs) {
        return Err(size_error(path, variant, bytes.len() as u64));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / rs * CIFAR_PIXELS);
    let labels = bytes
        .chunks_exact(rs)
        .map(|r| decode_record(r, variant, &mut pixels))
        .collect();
    finish(path, variant, pixels, labels)
}

/// Reads the whole file, then parses it.
pub fn load_cifar(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, variant, path)
}

/// Reads record by record through a buffer of `buffer_bytes`.
pub fn load_cifar_streamed(path: impl AsRef<Path>, variant: CifarVariant, buffer_bytes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let rs = variant.record_size();
    if len == 0 || len % rs as u64 != 0 {
        return Err(size_error(path, variant, len));
    }
    let mut reader = BufReader::with_capacity(buffer_bytes.max(1), file);
    let mut rec = vec![0u8; rs];
    let mut pixels = Vec::with_capacity(len as usize / rs * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(len as usize / rs);
    for _ in 0..len / rs as u64 {
        reader.read_exact(&mut rec).map_err(|e| Error::io(path, e))?;
        labels.push(decode_record(&rec, variant, &mut pixels));
    }
    finish(path, variant, pixels, labels)
}

/// Nearest-neighbor resize of every image to `size × size`.
pub fn upsample_nearest(ds: &Dataset, size: usize) -> Result<Dataset> {
    let (c, h, w) = ds.image_shape();
    if size == 0 {
        return Err(Error::Config("resize target must be positive".into()));
    }
    if (h, w) == (size, size) {
        return Ok(ds.clone());
    }
    let src = ds.images.data();
    let mut out = Vec::with_capacity(ds.len() * c * size * size);
    for i in 0..ds.len() * c {
        let plane = &src[i * h * w..(i + 1) * h * w];
        for y in 0..size {
            let sy = y * h / size;
            for x in 0..size {
                out.push(plane[sy * w + x * w / size]);
            }
        }
    }
    Dataset::new(
        Tensor::new(&[ds.len(), c, size, size], out)?,
        ds.labels.clone(),
        ds.num_classes,
        ds.split.clone(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub n_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub noise_sigma: f64,
}

const PROTOTYPE_RETRIES: usize = 32;

/// Root-mean-square distance between two equally sized images.
pub fn rms_distance(a: &[f32], b: &[f32]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    (ss / a.len().max(1) as f64).sqrt()
}

/// Per-class prototypes, uniform in `[0, 1]`, redrawn until every pair is at
/// least `4σ` apart in RMS distance.
pub fn synth_prototypes(spec: &SynthSpec) -> Result<Vec<Vec<f32>>> {
    let per = spec.channels * spec.height * spec.width;
    if spec.num_classes == 0 || spec.n_per_class == 0 || per == 0 {
        return Err(Error::Config(
            "synthetic dataset needs classes, samples and pixels".into(),
        ));
    }
    if spec.noise_sigma.is_nan() || spec.noise_sigma < 0.0 {
        return Err(Error::Config(format!(
            "noise_sigma must be non-negative, got {}",
            spec.noise_sigma
        )));
    }
    let margin = 4.0 * spec.noise_sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..PROTOTYPE_RETRIES {
        let protos: Vec<Vec<f32>> = (0..spec.num_classes)
            .map(|_| (0..per).map(|_| rng.random::<f32>()).collect())
            .collect();
        let separated =
            (0..protos.len()).all(|a| (a + 1..protos.len()).all(|b| rms_distance(&protos[a], &protos[b]) >= margin));
        if separated {
            return Ok(protos);
        }
    }
    Err(Error::Config(format!(
        "could not draw {} prototypes separated by {margin} after {PROTOTYPE_RETRIES} attempts",
        spec.num_classes
    )))
}

/// Training split: prototype plus clamped Gaussian noise, classes interleaved.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    synth_split(spec, "train")
}

/// Any named split shares the prototypes; its noise stream depends on the name.
pub fn synth_split(spec: &SynthSpec, split: &str) -> Result<Dataset> {
    let protos = synth_prototypes(spec)?;
    let stream = split
        .bytes()
        .fold(1u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let n = spec.num_classes * spec.n_per_class;
    let per = protos[0].len();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        for &p in &protos[class] {
            let noise = if spec.noise_sigma > 0.0 {
                normal.sample(&mut rng) as f32
            } else {
                0.0
            };
            data.push((p + noise).clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(&[n, spec.channels, spec.height, spec.width], data)?,
        labels,
        spec.num_classes,
        split,
    )
}

/// Where a run's data comes from. Image geometry follows the model config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        seed: u64,
        n_per_class: usize,
        noise_sigma: f64,
    },
    Cifar {
        variant: CifarVariant,
        train_path: PathBuf,
        test_path: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub source: DatasetSource,
    /// Random flip and pad-crop on training batches.
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_mean")]
    pub mean: Vec<f64>,
    #[serde(default = "default_std")]
    pub std: Vec<f64>,
}

fn default_mean() -> Vec<f64> {
    vec![0.5]
}

fn default_std() -> Vec<f64> {
    vec![0.25]
}

impl DataSpec {
    pub fn synthetic(seed: u64, n_per_class: usize, noise_sigma: f64) -> Self {
        DataSpec {
            source: DatasetSource::Synthetic {
                seed,
                n_per_class,
                noise_sigma,
            },
            augment: false,
            mean: default_mean(),
            std: default_std(),
        }
    }

    pub fn normalization(&self, channels: usize) -> Result<Normalization> {
        Normalization::new(&self.mean, &self.std, channels)
    }

    /// Paths that must exist before any stage starts.
    pub fn required_paths(&self) -> Vec<&Path> {
        match &self.source {
            DatasetSource::Synthetic { .. } => Vec::new(),
            DatasetSource::Cifar {
                train_path, test_path, ..
            } => std::iter::once(train_path.as_path())
                .chain(test_path.as_deref())
                .collect(),
        }
    }

    /// Loads `split` ("train" or "test") shaped for a model with the given
    /// geometry and class count.
    pub fn load(&self, split: &str, image_size: usize, channels: usize, num_classes: usize) -> Result<Dataset> {
        let ds = match &self.source {
            DatasetSource::Synthetic {
                seed,
                n_per_class,
                noise_sigma,
            } => synth_split(
                &SynthSpec {
                    seed: *seed,
                    num_classes,
                    n_per_class: *n_per_class,
                    height: image_size,
                    width: image_size,
                    channels,
                    noise_sigma: *noise_sigma,
                },
                split,
            )?,
            DatasetSource::Cifar {
                variant,
                train_path,
                test_path,
            } => {
                let path = match split {
                    "train" => train_path,
                    _ => test_path.as_ref().unwrap_or(train_path),
                };
                if channels != 3 || num_classes != variant.num_classes() {
                    return Err(Error::Config(format!(
                        "{variant:?} needs 3 channels and {} classes, model has {channels} and {num_classes}",
                        variant.num_classes()
                    )));
                }
                upsample_nearest(&load_cifar(path, *variant)?, image_size)?
            }
        };
        Ok(ds)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// A single value is broadcast to every channel.
    pub fn new(mean: &[f64], std: &[f64], channels: usize) -> Result<Self> {
        let expand = |v: &[f64], what: &str| -> Result<Vec<f64>> {
            match v.len() {
                1 => Ok(vec![v[0]; channels]),
                n if n == channels => Ok(v.to_vec()),
                n => Err(Error::Config(format!("{what} has {n} values for {channels} channels"))),
            }
        };
        let std = expand(std, "std")?;
        if std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::Config("std values must be positive".into()));
        }
        Ok(Normalization {
            mean: expand(mean, "mean")?,
            std,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub flip_prob: f64,
    pub pad: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { flip_prob: 0.5, pad: 4 }
    }
}

/// Mirrors one `C×H×W` image left to right, in place.
pub fn hflip(img: &mut [f32], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Crop offset in `[0, 2·pad]` per axis.
pub fn crop_offset(rng: &mut ChaCha8Rng, pad: usize) -> (usize, usize) {
    (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
}

/// Zero-pads by `pad` on every side, then crops `H×W` at `(dy, dx)` of the padded image.
pub fn pad_crop(img: &[f32], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Augments (when `augment` is given) and then normalizes a `[B×C×H×W]` batch.
pub fn preprocess(
    batch: &Tensor<f32>,
    augment: Option<Augment>,
    norm: &Normalization,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let shape = batch.shape().to_vec();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::dim("preprocess", &shape, &[0, 0, 0, 0]));
    };
    if norm.mean.len() != c {
        return Err(Error::Config(format!(
            "normalization has {} channels, batch {c}",
            norm.mean.len()
        )));
    }
    let per = c * h * w;
    let mut out = Vec::with_capacity(b * per);
    for i in 0..b {
        let mut img = batch.data()[i * per..(i + 1) * per].to_vec();
        if let Some(aug) = augment {
            if rng.random_bool(aug.flip_prob.clamp(0.0, 1.0)) {
                hflip(&mut img, c, h, w);
            }
            if aug.pad > 0 {
                let (dy, dx) = crop_offset(rng, aug.pad);
                img = pad_crop(&img, c, h, w, aug.pad, dy, dx);
            }
        }
        for (ch, plane) in img.chunks_exact_mut(h * w).enumerate() {
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            for v in plane {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        out.extend(img);
    }
    Tensor::new(&shape, out)
}
