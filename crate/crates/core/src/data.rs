//! Dataset ingestion and proxy subsampling.
//!
//! CIFAR binary files are sequences of 3073-byte records: one label byte
//! followed by a 3×32×32 image stored channel-major (all red, then green,
//! then blue, each row-major).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_CLASSES: usize = 10;
/// Per-channel RGB mean and std of CIFAR-10 training pixels in [0, 1].
pub const CIFAR10_MEAN: [f64; 3] = [125.3 / 255.0, 123.0 / 255.0, 113.9 / 255.0];
pub const CIFAR10_STD: [f64; 3] = [63.0 / 255.0, 62.1 / 255.0, 66.7 / 255.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Recipe for a class-conditional Gaussian image set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub resolution: usize,
    pub channels: usize,
    /// Pixel noise standard deviation relative to the unit-scale class pattern.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, resolution: usize, seed: u64) -> Self {
        SynthSpec {
            classes,
            per_class,
            resolution,
            channels: 3,
            noise: 1.0,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    CifarBinary { paths: Vec<PathBuf> },
    Synthetic(SynthSpec),
    Subset { parent: String, seed: u64 },
}

/// Images `[N, C, H, W]` (per-channel standardized) with integer labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub source: DatasetSource,
    pub normalization: Normalization,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Short stable description used in manifests and proxy identities.
    pub fn identity(&self) -> String {
        match &self.source {
            DatasetSource::CifarBinary { paths } => format!(
                "cifar:{}",
                paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
            ),
            DatasetSource::Synthetic(s) => format!(
                "synth:{}x{}@{}:noise{}:seed{}",
                s.classes, s.per_class, s.resolution, s.noise, s.seed
            ),
            DatasetSource::Subset { parent, seed } => format!("{parent}/subset:{seed}"),
        }
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, indices: &[usize], seed: u64) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            source: DatasetSource::Subset {
                parent: self.identity(),
                seed,
            },
            normalization: self.normalization.clone(),
        }
    }

    /// Balanced train/held-out split: `holdout_per_class` random images of
    /// every class go to the second set.
    pub fn split_holdout(&self, holdout_per_class: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let mut rng = seed::rng(seed);
        let mut held = HashSet::new();
        for class in 0..self.class_count {
            let idx = self.indices_of_class(class);
            if idx.len() <= holdout_per_class {
                return Err(Error::InsufficientData(format!(
                    "class {class} has {} images, cannot hold out {holdout_per_class}",
                    idx.len()
                )));
            }
            for k in sample(&mut rng, idx.len(), holdout_per_class) {
                held.insert(idx[k]);
            }
        }
        let (test, train): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|i| held.contains(i));
        Ok((self.subset(&train, seed), self.subset(&test, seed)))
    }

    /// Random batch of `n` images (labels dropped) for training-free metrics.
    pub fn random_batch(&self, n: usize, seed: u64) -> Result<Tensor<f32>> {
        if n > self.len() {
            return Err(Error::InsufficientData(format!(
                "batch of {n} requested from {} images",
                self.len()
            )));
        }
        let idx = sample(&mut seed::rng(seed), self.len(), n).into_vec();
        Ok(self.images.select_batch(&idx))
    }
}

/// Reads one or more CIFAR-10 binary batch files.
pub fn load_cifar_binary(paths: &[impl AsRef<Path>]) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if raw.is_empty() {
            return Err(Error::Format {
                offset: 0,
                detail: format!("{} is empty", path.display()),
            });
        }
        let whole = raw.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        if whole != raw.len() {
            return Err(Error::Format {
                offset: whole as u64,
                detail: format!(
                    "{}: truncated record ({} trailing bytes, records are {CIFAR_RECORD_BYTES})",
                    path.display(),
                    raw.len() - whole
                ),
            });
        }
        for (r, rec) in raw.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            let label = rec[0] as usize;
            if label >= CIFAR10_CLASSES {
                return Err(Error::Format {
                    offset: (r * CIFAR_RECORD_BYTES) as u64,
                    detail: format!("label {label} outside 0..{CIFAR10_CLASSES}"),
                });
            }
            labels.push(label);
            bytes.extend_from_slice(&rec[1..]);
        }
    }
    let plane = 32 * 32;
    let data: Vec<f32> = bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let ch = (i / plane) % 3;
            ((b as f64 / 255.0 - CIFAR10_MEAN[ch]) / CIFAR10_STD[ch]) as f32
        })
        .collect();
    let n = labels.len();
    Ok(LabeledDataset {
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        class_count: CIFAR10_CLASSES,
        source: DatasetSource::CifarBinary {
            paths: paths.iter().map(|p| p.as_ref().to_path_buf()).collect(),
        },
        normalization: Normalization {
            mean: CIFAR10_MEAN.to_vec(),
            std: CIFAR10_STD.to_vec(),
        },
    })
}

/// Class-conditional Gaussian images: each class has a fixed prototype made
/// of a per-channel offset plus a low-frequency spatial wave, and samples
/// add i.i.d. pixel noise. Sample `i` belongs to class `i % classes`.
/// The result is standardized per channel with its own statistics.
pub fn synth_dataset(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.resolution == 0 || spec.channels == 0 {
        return Err(Error::Config(format!("degenerate synthetic spec {spec:?}")));
    }
    let (c, r) = (spec.channels, spec.resolution);
    let plane = r * r;
    let mut proto_rng = seed::rng(seed::derive(spec.seed, "prototypes"));
    let mut prototypes = vec![0.0f64; spec.classes * c * plane];
    for class in 0..spec.classes {
        for ch in 0..c {
            let offset: f64 = StandardNormal.sample(&mut proto_rng);
            let amp: f64 = proto_rng.random_range(0.5..1.0);
            let fx: f64 = proto_rng.random_range(0.5..2.0);
            let fy: f64 = proto_rng.random_range(0.5..2.0);
            let phase: f64 = proto_rng.random_range(0.0..std::f64::consts::TAU);
            for y in 0..r {
                for x in 0..r {
                    let u = x as f64 / r as f64 * std::f64::consts::TAU;
                    let v = y as f64 / r as f64 * std::f64::consts::TAU;
                    prototypes[(class * c + ch) * plane + y * r + x] =
                        offset + amp * (fx * u + fy * v + phase).sin();
                }
            }
        }
    }
    let n = spec.classes * spec.per_class;
    let mut noise_rng = seed::rng(seed::derive(spec.seed, "samples"));
    let mut raw = vec![0.0f64; n * c * plane];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        labels.push(class);
        let proto = &prototypes[class * c * plane..(class + 1) * c * plane];
        for (dst, &p) in raw[i * c * plane..(i + 1) * c * plane].iter_mut().zip(proto) {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            *dst = p + spec.noise * z;
        }
    }
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let vals = (0..n).flat_map(|i| raw[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter());
        let (s, s2, cnt) = vals.fold((0.0, 0.0, 0.0), |(s, s2, k), &v| (s + v, s2 + v * v, k + 1.0));
        mean[ch] = s / cnt;
        std[ch] = (s2 / cnt - mean[ch] * mean[ch]).max(1e-12).sqrt();
    }
    let data = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / plane) % c;
            ((v - mean[ch]) / std[ch]) as f32
        })
        .collect();
    Ok(LabeledDataset {
        images: Tensor::new(vec![n, c, r, r], data)?,
        labels,
        class_count: spec.classes,
        source: DatasetSource::Synthetic(spec.clone()),
        normalization: Normalization { mean, std },
    })
}

/// Balanced class/image subsample with labels remapped to `0..k`.
#[derive(Clone, Debug)]
pub struct ProxyDataset {
    pub parent: String,
    /// Parent class ids in the order they were drawn; position = new label.
    pub class_ids: Vec<usize>,
    pub per_class: usize,
    pub seed: u64,
    pub source_indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ProxyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }
}

/// Draws `k_classes` classes uniformly without replacement, then
/// `per_class` images uniformly without replacement from each.
pub fn sample_proxy(dataset: &LabeledDataset, k_classes: usize, per_class: usize, seed: u64) -> Result<ProxyDataset> {
    if k_classes == 0 || per_class == 0 {
        return Err(Error::Config("proxy needs at least one class and one image per class".into()));
    }
    if k_classes > dataset.class_count {
        return Err(Error::InsufficientData(format!(
            "requested {k_classes} classes from a dataset with {}",
            dataset.class_count
        )));
    }
    let mut rng = seed::rng(seed);
    let class_ids: Vec<usize> = sample(&mut rng, dataset.class_count, k_classes).into_vec();
    let mut source_indices = Vec::with_capacity(k_classes * per_class);
    let mut labels = Vec::with_capacity(k_classes * per_class);
    for (new_label, &class) in class_ids.iter().enumerate() {
        let pool = dataset.indices_of_class(class);
        if pool.len() < per_class {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} images, {per_class} requested",
                pool.len()
            )));
        }
        for k in sample(&mut rng, pool.len(), per_class) {
            source_indices.push(pool[k]);
            labels.push(new_label);
        }
    }
    Ok(ProxyDataset {
        parent: dataset.identity(),
        images: dataset.images.select_batch(&source_indices),
        class_ids,
        per_class,
        seed,
        source_indices,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_records(labels: &[u8], extra: usize) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let mut rec = vec![l];
            rec.extend((0..3072).map(|p| ((p + i * 7) % 256) as u8));
            f.write_all(&rec).unwrap();
        }
        f.write_all(&vec![0u8; extra]).unwrap();
        f
    }

    #[test]
    fn reads_two_records() {
        let f = write_records(&[3, 7], 0);
        let ds = load_cifar_binary(&[f.path()]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        // byte 1 of record 0 is the first red pixel, value 0
        let expect = ((0.0 - CIFAR10_MEAN[0]) / CIFAR10_STD[0]) as f32;
        assert_eq!(ds.images.data()[0], expect);
        // first blue pixel of record 1: raw byte (2048 + 7) % 256
        let raw = ((2048 + 7) % 256) as f64 / 255.0;
        let expect = ((raw - CIFAR10_MEAN[2]) / CIFAR10_STD[2]) as f32;
        assert_eq!(ds.images.data()[3072 + 2048], expect);
    }

    #[test]
    fn empty_and_truncated_files_fail() {
        let f = write_records(&[], 0);
        assert!(matches!(load_cifar_binary(&[f.path()]), Err(Error::Format { offset: 0, .. })));
        let f = write_records(&[1, 2], 100);
        let err = load_cifar_binary(&[f.path()]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == 2 * 3073 as u64), "{err}");
    }

    #[test]
    fn record_count_follows_file_size() {
        let labels: Vec<u8> = (0..250).map(|i| (i % 10) as u8).collect();
        let f = write_records(&labels, 0);
        let size = std::fs::metadata(f.path()).unwrap().len() as usize;
        let ds = load_cifar_binary(&[f.path()]).unwrap();
        assert_eq!(ds.len(), size / 3073);
    }

    #[test]
    fn synthetic_is_balanced_and_reproducible() {
        let spec = SynthSpec::new(10, 100, 8, 5);
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        assert_eq!(a.len(), 1000);
        for class in 0..10 {
            assert_eq!(a.indices_of_class(class).len(), 100);
        }
        assert_eq!(a.images, b.images);
        assert!(a.images.all_finite());
    }

    #[test]
    fn proxy_is_balanced_and_relabelled() {
        let ds = synth_dataset(&SynthSpec::new(12, 15, 4, 1)).unwrap();
        let p = sample_proxy(&ds, 10, 10, 9).unwrap();
        assert_eq!(p.len(), 100);
        for k in 0..10 {
            assert_eq!(p.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        for (&src, &lab) in p.source_indices.iter().zip(&p.labels) {
            assert_eq!(ds.labels[src], p.class_ids[lab]);
        }
        let again = sample_proxy(&ds, 10, 10, 9).unwrap();
        assert_eq!(again.source_indices, p.source_indices);
        let other = sample_proxy(&ds, 10, 10, 10).unwrap();
        assert_ne!(other.source_indices, p.source_indices);
    }

    #[test]
    fn full_proxy_is_a_permutation() {
        let ds = synth_dataset(&SynthSpec::new(4, 6, 4, 2)).unwrap();
        let p = sample_proxy(&ds, 4, 6, 3).unwrap();
        let mut idx = p.source_indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn proxy_rejects_oversampling() {
        let ds = synth_dataset(&SynthSpec::new(3, 5, 4, 2)).unwrap();
        assert!(matches!(sample_proxy(&ds, 3, 6, 0), Err(Error::InsufficientData(_))));
        assert!(matches!(sample_proxy(&ds, 4, 1, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn holdout_split_is_balanced() {
        let ds = synth_dataset(&SynthSpec::new(3, 10, 4, 2)).unwrap();
        let (train, test) = ds.split_holdout(2, 4).unwrap();
        assert_eq!((train.len(), test.len()), (24, 6));
        for c in 0..3 {
            assert_eq!(test.indices_of_class(c).len(), 2);
        }
    }
}
