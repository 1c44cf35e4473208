//! Datasets: seeded synthetic blobs and CIFAR-10 binary batches.
//!
//! Spec strings look like `synthetic:classes=4,size=16,n=256,seed=7` or
//! `cifar10:path=data/cifar-10-batches-bin,downscale=4,limit=2000`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    SyntheticBlobs { noise: f64 },
    Cifar10Binary { path: PathBuf, downscale: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    pub image_size: usize,
    pub classes: usize,
    /// Number of examples drawn (synthetic) or kept at most (files).
    pub samples: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::SyntheticBlobs { noise: 0.6 },
            image_size: 16,
            classes: 4,
            samples: 256,
            seed: 7,
            train_fraction: 0.5,
            val_fraction: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn parse(text: &str) -> Result<DatasetSpec> {
        let bad = |m: String| Error::Config(format!("dataset `{text}`: {m}"));
        let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
        let mut spec = DatasetSpec::default();
        let mut path = None;
        let mut downscale = 1;
        let mut noise = 0.6;
        let mut limit = None;
        for kv in rest.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(format!("`{kv}` is not key=value")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("`{k}` needs an integer, got `{v}`")));
            let real = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("`{k}` needs a number, got `{v}`")));
            match k {
                "classes" => spec.classes = num(v)?,
                "size" => spec.image_size = num(v)?,
                "n" => spec.samples = num(v)?,
                "limit" => limit = Some(num(v)?),
                "seed" => spec.seed = num(v)? as u64,
                "noise" => noise = real(v)?,
                "train" => spec.train_fraction = real(v)?,
                "val" => spec.val_fraction = real(v)?,
                "path" => path = Some(PathBuf::from(v)),
                "downscale" => downscale = num(v)?,
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        spec.source = match kind {
            "synthetic" | "synthetic-blobs" => DataSource::SyntheticBlobs { noise },
            "cifar10" | "cifar10-binary" => {
                let path = path.ok_or_else(|| bad("cifar10 needs path=<file or directory>".into()))?;
                if downscale == 0 || 32 % downscale != 0 {
                    return Err(bad(format!("downscale {downscale} must divide 32")));
                }
                spec.classes = 10;
                spec.image_size = 32 / downscale;
                spec.samples = limit.unwrap_or(usize::MAX);
                DataSource::Cifar10Binary { path, downscale }
            }
            _ => return Err(bad(format!("unknown source `{kind}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v > 0.0 && t + v <= 1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "train/val fractions must be positive with sum ≤ 1, got {t} and {v}"
            )));
        }
        if self.classes < 2 || self.image_size == 0 || self.samples < 2 {
            return Err(Error::Config("dataset needs ≥ 2 classes, ≥ 2 samples and a positive image size".into()));
        }
        if let DataSource::SyntheticBlobs { noise } = self.source {
            if !(noise >= 0.0) {
                return Err(Error::Config("synthetic noise must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Images `(N, 3, H, W)` flattened in NCHW order plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        let l = self.image_len();
        Dataset {
            images: idx.iter().flat_map(|&i| self.images[i * l..(i + 1) * l].iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            size: self.size,
            classes: self.classes,
        }
    }

    /// Mini-batches for one epoch in a seeded order. The last partial batch
    /// is kept.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize, dtype: DType) -> Result<Vec<(Tensor, Vec<usize>)>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let l = self.image_len();
        order
            .chunks(batch_size)
            .map(|chunk| {
                let data: Vec<f64> = chunk
                    .iter()
                    .flat_map(|&i| self.images[i * l..(i + 1) * l].iter().copied())
                    .collect();
                let x = Tensor::new(&[chunk.len(), self.channels, self.size, self.size], data, dtype)?;
                Ok((x, chunk.iter().map(|&i| self.labels[i]).collect()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    /// Examples left over after the train and val fractions; may be empty.
    pub test: Dataset,
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let all = match &spec.source {
        DataSource::SyntheticBlobs { noise } => synthetic_blobs(spec.classes, spec.image_size, spec.samples, spec.seed, *noise),
        DataSource::Cifar10Binary { path, downscale } => {
            let mut d = read_cifar(path, *downscale)?;
            if d.len() > spec.samples {
                d = d.subset(&(0..spec.samples).collect::<Vec<_>>());
            }
            d
        }
    };
    Ok(split(&all, spec.train_fraction, spec.val_fraction, spec.seed))
}

/// Seeded shuffle, then contiguous train / val / rest partitions.
pub fn split(all: &Dataset, train: f64, val: f64, seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
    let n = all.len();
    let nt = ((n as f64 * train).round() as usize).clamp(1, n - 1);
    let nv = ((n as f64 * val).round() as usize).min(n - nt).max(1);
    Splits {
        train: all.subset(&order[..nt]),
        val: all.subset(&order[nt..nt + nv]),
        test: all.subset(&order[nt + nv..]),
    }
}

/// Each class is a random per-channel offset plus a smooth spatial pattern;
/// examples add Gaussian pixel noise. Classes differ in channel means, so
/// they stay separable after global average pooling.
pub fn synthetic_blobs(classes: usize, size: usize, n: usize, seed: u64, noise: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let c = 3;
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let offset: Vec<f64> = (0..c).map(|_| 1.5 * unit.sample(&mut rng)).collect();
            let (fy, fx, ph): (f64, f64, f64) = (
                0.2 + unit.sample(&mut rng).abs(),
                0.2 + unit.sample(&mut rng).abs(),
                unit.sample(&mut rng),
            );
            let mut img = Vec::with_capacity(c * size * size);
            for (ci, off) in offset.iter().enumerate() {
                for y in 0..size {
                    for x in 0..size {
                        let wave = (fy * y as f64 + fx * x as f64 + ph + ci as f64).sin();
                        img.push(off + 0.5 * wave);
                    }
                }
            }
            img
        })
        .collect();
    let mut images = Vec::with_capacity(n * c * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        images.extend(protos[label].iter().map(|&p| p + noise * unit.sample(&mut rng)));
        labels.push(label);
    }
    Dataset {
        images,
        labels,
        channels: c,
        size,
        classes,
    }
}

fn cifar_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("CIFAR path {} does not exist", path.display()),
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!("no data_batch_*.bin files in {}", path.display())));
    }
    Ok(files)
}

/// Reads 3073-byte records (label byte, then 3×32×32 pixel bytes), scales
/// pixels to [0, 1], standardizes per channel and average-pools by
/// `downscale`.
pub fn read_cifar(path: &Path, downscale: usize) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in cifar_files(path)? {
        let b = std::fs::read(&f)?;
        if b.is_empty() || b.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                f.display(),
                b.len()
            )));
        }
        bytes.extend(b);
    }
    decode_cifar(&bytes, downscale)
}

pub fn decode_cifar(bytes: &[u8], downscale: usize) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let size = 32 / downscale;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3 * size * size);
    let mut labels = Vec::new();
    let area = (downscale * downscale) as f64;
    for (ri, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!("record {ri} has label {label}, expected 0..9")));
        }
        labels.push(label);
        for c in 0..3 {
            let plane = &rec[1 + c * 1024..1 + (c + 1) * 1024];
            for y in 0..size {
                for x in 0..size {
                    let mut s = 0.0;
                    for dy in 0..downscale {
                        for dx in 0..downscale {
                            s += plane[(y * downscale + dy) * 32 + x * downscale + dx] as f64;
                        }
                    }
                    images.push((s / area / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
                }
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        size,
        classes: 10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_seed_determined() {
        let spec = DatasetSpec::parse("synthetic:classes=4,size=16,n=64,seed=7").unwrap();
        let a = load_dataset(&spec).unwrap();
        let b = load_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let ba = a.train.batches(8, 3, 0, DType::F32).unwrap();
        let bb = b.train.batches(8, 3, 0, DType::F32).unwrap();
        assert_eq!(ba.len(), bb.len());
        for ((x, l), (y, m)) in ba.iter().zip(&bb) {
            assert_eq!(x.data(), y.data());
            assert_eq!(l, m);
        }
    }

    #[test]
    fn default_split_is_half_and_half_and_disjoint() {
        let all = synthetic_blobs(3, 4, 30, 1, 0.1);
        let s = split(&all, 0.5, 0.5, 9);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (15, 15, 0));
        let mut seen: Vec<&[f64]> = s.train.images.chunks(48).chain(s.val.images.chunks(48)).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 30);
    }

    #[test]
    fn cifar_records_decode() {
        let mut bytes = Vec::new();
        for i in 0..5u8 {
            bytes.push(i);
            bytes.extend(std::iter::repeat(i * 10).take(3072));
        }
        let d = decode_cifar(&bytes, 4).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.labels, vec![0, 1, 2, 3, 4]);
        assert_eq!(d.size, 8);
        let expect = (10.0 / 255.0 - CIFAR_MEAN[0]) / CIFAR_STD[0];
        assert!((d.images[3 * 64] - expect).abs() < 1e-12);
    }

    #[test]
    fn truncated_or_mislabelled_cifar_is_a_format_error() {
        assert!(matches!(decode_cifar(&[0u8; 3072], 1), Err(Error::Format(_))));
        let mut rec = vec![11u8];
        rec.extend([0u8; 3072]);
        assert!(matches!(decode_cifar(&rec, 1), Err(Error::Format(_))));
    }

    #[test]
    fn cifar_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("toponas-cifar-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut bytes = Vec::new();
        for i in 0..4u8 {
            bytes.push(i % 10);
            bytes.extend(std::iter::repeat(7).take(3072));
        }
        std::fs::write(dir.join("data_batch_1.bin"), &bytes).unwrap();
        let spec = DatasetSpec::parse(&format!("cifar10:path={},downscale=8", dir.display())).unwrap();
        let s = load_dataset(&spec).unwrap();
        assert_eq!(s.train.len() + s.val.len(), 4);
        std::fs::write(dir.join("data_batch_1.bin"), &bytes[..100]).unwrap();
        assert!(matches!(load_dataset(&spec), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn bad_specs_are_config_errors() {
        for s in ["mnist", "synthetic:classes=x", "synthetic:train=0.8,val=0.5", "cifar10:downscale=2"] {
            assert!(matches!(DatasetSpec::parse(s), Err(Error::Config(_))), "{s}");
        }
    }
}
