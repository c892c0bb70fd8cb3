//! Dataset ingestion: CIFAR binary records and seeded synthetic data.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgadError};
use crate::nn::Feature;

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Images stored flat, channel-major per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// Synthetic datasets mark the samples generated with heavy corruption.
    pub hard: Vec<bool>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> Feature {
        let n = self.sample_len();
        Feature {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.images[i * n..(i + 1) * n].to_vec(),
        }
    }

    /// First `n` samples (or all if fewer).
    pub fn truncate(mut self, n: usize) -> Self {
        if n < self.len() {
            self.images.truncate(n * self.sample_len());
            self.labels.truncate(n);
            if !self.hard.is_empty() {
                self.hard.truncate(n);
            }
        }
        self
    }

    /// Per-channel `(x - mean) / std`.
    pub fn normalize(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        if mean.len() != self.channels || std.len() != self.channels || std.iter().any(|&s| s <= 0.0) {
            return Err(SgadError::Config(format!(
                "normalization needs {} means and positive stds, got {mean:?} / {std:?}",
                self.channels
            )));
        }
        let plane = self.height * self.width;
        for sample in self.images.chunks_exact_mut(self.channels * plane) {
            for (c, ch) in sample.chunks_exact_mut(plane).enumerate() {
                for v in ch {
                    *v = (*v - mean[c]) / std[c];
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Cifar10Binary,
    Cifar100Binary,
    Synthetic,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Cifar10Binary => "cifar10-binary",
            DataSource::Cifar100Binary => "cifar100-binary",
            DataSource::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DataSource {
    type Err = SgadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-binary" => Ok(DataSource::Cifar10Binary),
            "cifar100-binary" => Ok(DataSource::Cifar100Binary),
            "synthetic" => Ok(DataSource::Synthetic),
            other => Err(SgadError::Config(format!("unknown data source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Directory with the CIFAR binaries; falls back to `SGAD_DATA_DIR`.
    pub path: Option<String>,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Fraction of synthetic samples drawn from the hard regime.
    pub difficulty_mix: f32,
    /// Base corruption level of synthetic samples.
    pub noise: f32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            seed: 0,
            train_size: 5000,
            test_size: 1000,
            mean: vec![0.0, 0.0, 0.0],
            std: vec![1.0, 1.0, 1.0],
            difficulty_mix: 0.3,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Parses CIFAR binary records: `label_bytes` label bytes (the last one is
/// used) followed by a 3x32x32 channel-major image. `base_offset` is added
/// to reported byte offsets.
pub fn parse_cifar_records(bytes: &[u8], label_bytes: usize, num_classes: usize, base_offset: u64) -> Result<(Vec<u8>, Vec<usize>)> {
    let record = label_bytes + CIFAR_IMAGE_BYTES;
    if bytes.is_empty() {
        return Err(SgadError::Ingestion {
            offset: base_offset,
            reason: "empty file".into(),
        });
    }
    let full = bytes.len() / record;
    if bytes.len() % record != 0 {
        return Err(SgadError::Ingestion {
            offset: base_offset + (full * record) as u64,
            reason: format!(
                "truncated record: {} trailing bytes, records are {record} bytes",
                bytes.len() % record
            ),
        });
    }
    let mut pixels = Vec::with_capacity(full * CIFAR_IMAGE_BYTES);
    let mut labels = Vec::with_capacity(full);
    for (r, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= num_classes {
            return Err(SgadError::Ingestion {
                offset: base_offset + (r * record + label_bytes - 1) as u64,
                reason: format!("label {label} >= {num_classes} classes"),
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[label_bytes..]);
    }
    Ok((pixels, labels))
}

fn cifar_files(source: DataSource, split: Split) -> Vec<&'static str> {
    match (source, split) {
        (DataSource::Cifar10Binary, Split::Train) => vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        (DataSource::Cifar10Binary, Split::Test) => vec!["test_batch.bin"],
        (DataSource::Cifar100Binary, Split::Train) => vec!["train.bin"],
        (DataSource::Cifar100Binary, Split::Test) => vec!["test.bin"],
        (DataSource::Synthetic, _) => vec![],
    }
}

/// Decodes a list of CIFAR files into a dataset scaled to [0, 1] (not yet normalized).
pub fn read_cifar_files(files: &[PathBuf], label_bytes: usize, num_classes: usize) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let bytes = std::fs::read(path)?;
        let (pixels, l) = parse_cifar_records(&bytes, label_bytes, num_classes, 0).map_err(|e| match e {
            SgadError::Ingestion { offset, reason } => SgadError::Ingestion {
                offset,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })?;
        images.extend(pixels.into_iter().map(|p| p as f32 / 255.0));
        labels.extend(l);
    }
    Ok(Dataset {
        channels: 3,
        height: 32,
        width: 32,
        num_classes,
        images,
        labels,
        hard: Vec::new(),
    })
}

/// Resolves the data directory from the spec or `SGAD_DATA_DIR`.
pub fn data_root(spec: &DatasetSpec) -> Result<PathBuf> {
    spec.path
        .clone()
        .or_else(|| std::env::var("SGAD_DATA_DIR").ok())
        .map(PathBuf::from)
        .ok_or_else(|| SgadError::Config("no dataset path given and SGAD_DATA_DIR is unset".into()))
}

pub fn load_cifar(spec: &DatasetSpec, root: &Path, split: Split, num_classes: usize) -> Result<Dataset> {
    let label_bytes = match spec.source {
        DataSource::Cifar10Binary => 1,
        DataSource::Cifar100Binary => 2,
        DataSource::Synthetic => {
            return Err(SgadError::Config("load_cifar called for a synthetic source".into()));
        }
    };
    let files: Vec<PathBuf> = cifar_files(spec.source, split).iter().map(|f| root.join(f)).collect();
    let limit = match split {
        Split::Train => spec.train_size,
        Split::Test => spec.test_size,
    };
    let mut ds = read_cifar_files(&files, label_bytes, num_classes)?.truncate(limit);
    ds.normalize(&spec.mean, &spec.std)?;
    Ok(ds)
}

/// Shape and difficulty knobs for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    pub difficulty_mix: f32,
    pub noise: f32,
}

fn prototypes(seed: u64, spec: &SynthSpec) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.size;
    let n = spec.channels * s * s;
    let tau = std::f32::consts::TAU;
    (0..spec.num_classes)
        .map(|_| {
            let mut img = vec![0.0f32; n];
            for c in 0..spec.channels {
                for _ in 0..3 {
                    let fy = rng.gen_range(0..=3) as f32;
                    let fx = rng.gen_range(0..=3) as f32;
                    let phase = rng.gen_range(0.0..tau);
                    let amp = rng.gen_range(0.5..1.0f32);
                    for y in 0..s {
                        for x in 0..s {
                            let t = tau * (fy * y as f32 + fx * x as f32) / s as f32 + phase;
                            img[(c * s + y) * s + x] += amp * t.cos();
                        }
                    }
                }
            }
            let mean = img.iter().sum::<f32>() / n as f32;
            let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n as f32;
            let inv = 1.0 / var.sqrt().max(1e-6);
            img.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            img
        })
        .collect()
}

/// Class-conditional smooth patterns with per-sample corruption.
///
/// Class prototypes depend on `seed` only; `stream` selects an independent
/// sample stream (e.g. 0 for train, 1 for test). Easy samples are the
/// prototype circularly shifted by up to one pixel plus Gaussian noise of std
/// `noise`. Hard samples (a `difficulty_mix` fraction) are blended with
/// another class's prototype and get three times the noise. With `noise = 0`
/// every sample is its class prototype.
pub fn synth_dataset(seed: u64, stream: u64, n_samples: usize, spec: &SynthSpec) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(SgadError::Config(format!("need at least 2 classes, got {}", spec.num_classes)));
    }
    if spec.channels == 0 || spec.size == 0 || !(0.0..=1.0).contains(&spec.difficulty_mix) || spec.noise < 0.0 {
        return Err(SgadError::Config(format!("invalid synthetic dataset spec {spec:?}")));
    }
    let protos = prototypes(seed, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    rng.set_stream(stream + 1);
    let s = spec.size;
    let per = spec.channels * s * s;
    let mut images = Vec::with_capacity(n_samples * per);
    let mut labels = Vec::with_capacity(n_samples);
    let mut hard = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let y = rng.gen_range(0..spec.num_classes);
        let is_hard = rng.gen::<f32>() < spec.difficulty_mix;
        let (level, blend, other) = if is_hard {
            let other = (y + rng.gen_range(1..spec.num_classes)) % spec.num_classes;
            (3.0 * spec.noise, (0.45 * spec.noise.min(1.0)) * rng.gen_range(0.6..1.0f32), other)
        } else {
            (spec.noise, 0.0, y)
        };
        let (dy, dx) = if spec.noise > 0.0 {
            (rng.gen_range(-1i64..=1), rng.gen_range(-1i64..=1))
        } else {
            (0, 0)
        };
        for c in 0..spec.channels {
            for yy in 0..s {
                for xx in 0..s {
                    let sy = (yy as i64 + dy).rem_euclid(s as i64) as usize;
                    let sx = (xx as i64 + dx).rem_euclid(s as i64) as usize;
                    let k = (c * s + sy) * s + sx;
                    let base = (1.0 - blend) * protos[y][k] + blend * protos[other][k];
                    let eps: f32 = StandardNormal.sample(&mut rng);
                    images.push(base + level * eps);
                }
            }
        }
        labels.push(y);
        hard.push(is_hard);
    }
    Ok(Dataset {
        channels: spec.channels,
        height: s,
        width: s,
        num_classes: spec.num_classes,
        images,
        labels,
        hard,
    })
}
