//! Dataset ingestion and generation.
//!
//! All loaders produce images as `N×C×H×W` (or `N×D` for flat feature
//! data) standardized per channel with statistics computed on the training
//! split. The test split is normalized with the training statistics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise::{Purpose, RngStream, StreamPath};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Channel axis is axis 1 of `shape` (`N×C×…`); trailing axes are pooled.
    pub fn compute(raw: &[f64], shape: &[usize]) -> Self {
        let (n, c) = (shape[0], shape[1]);
        let spatial = numel(&shape[2..]);
        let count = (n * spatial) as f64;
        let mut mean = vec![0f64; c];
        for i in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = (i * c + ch) * spatial;
                *m += raw[base..base + spatial].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0f64; c];
        for i in 0..n {
            for (ch, v) in var.iter_mut().enumerate() {
                let base = (i * c + ch) * spatial;
                *v += raw[base..base + spatial]
                    .iter()
                    .map(|x| (x - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
        Self { mean, std }
    }

    fn apply<T: Scalar>(&self, raw: &[f64], shape: &[usize]) -> Tensor<T> {
        let c = shape[1];
        let spatial = numel(&shape[2..]);
        let data = raw
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let ch = (i / spatial) % c;
                // constant channels have no spread to divide out
                let s = if self.std[ch] > 1e-12 {
                    self.std[ch]
                } else {
                    1.0
                };
                T::of((x - self.mean[ch]) / s)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// Labeled images, normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    stats: NormalizationStats,
}

impl<T: Scalar> Dataset<T> {
    /// Wraps already-normalized images.
    pub fn new(
        images: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        stats: NormalizationStats,
    ) -> Result<Self> {
        let n = *images
            .shape()
            .first()
            .ok_or_else(|| Error::Dimension("dataset images must have a batch axis".into()))?;
        if images.shape().len() < 2 {
            return Err(Error::Dimension(format!(
                "dataset images need shape N×…, got {:?}",
                images.shape()
            )));
        }
        if n != labels.len() || n == 0 {
            return Err(Error::Input(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!(
                "label {l} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
            stats,
        })
    }

    /// Standardizes raw values with `stats` (or with statistics of `raw`
    /// itself when `stats` is `None`).
    pub fn from_raw(
        raw: &[f64],
        shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        stats: Option<&NormalizationStats>,
    ) -> Result<Self> {
        if shape.len() < 2 || numel(&shape) != raw.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "raw data of {} values does not fit shape {shape:?}",
                raw.len()
            )));
        }
        let stats = match stats {
            Some(s) if s.mean.len() == shape[1] => s.clone(),
            Some(s) => {
                return Err(Error::Dimension(format!(
                    "normalization has {} channels, data has {}",
                    s.mean.len(),
                    shape[1]
                )))
            }
            None => NormalizationStats::compute(raw, &shape),
        };
        let images = stats.apply(raw, &shape);
        Self::new(images, labels, num_classes, split, stats)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    /// Shape of one sample, e.g. `[3, 32, 32]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// Contiguous range `[start, start + count)`.
    pub fn range(&self, start: usize, count: usize) -> Result<(Tensor<T>, &[usize])> {
        let images = self.images.slice_rows(start, count)?;
        Ok((images, &self.labels[start..start + count]))
    }

    /// Dataset restricted to `indices` (order preserved).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Self::new(
            images,
            labels,
            self.num_classes,
            self.split,
            self.stats.clone(),
        )
    }
}

/// Dataset provenance written next to experiment outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub source: String,
    pub train_count: usize,
    pub test_count: usize,
    pub num_classes: usize,
    pub sample_shape: Vec<usize>,
    pub normalization: NormalizationStats,
    /// `(file name, sha256 hex)` for file-backed sources.
    pub source_hashes: Vec<(String, String)>,
}

impl DatasetMetadata {
    pub fn describe<T: Scalar>(
        source: impl Into<String>,
        train: &Dataset<T>,
        test: &Dataset<T>,
        files: &[PathBuf],
    ) -> Result<Self> {
        let source_hashes = files
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok((name, sha256_hex(&bytes)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            source: source.into(),
            train_count: train.len(),
            test_count: test.len(),
            num_classes: train.num_classes(),
            sample_shape: train.sample_shape().to_vec(),
            normalization: train.stats().clone(),
            source_hashes,
        })
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses CIFAR-10 binary records: one label byte followed by 3072 pixel
/// bytes, channel-planar R, G, B, each 32×32 row-major. Pixels are scaled
/// to `[0, 1]`.
pub fn parse_cifar10_records(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR10_RECORD) || bytes.is_empty() {
        let offset = bytes.len() - bytes.len() % CIFAR10_RECORD;
        return Err(Error::format(
            path,
            format!(
                "length {} is not a positive multiple of {CIFAR10_RECORD}; truncated record at byte offset {offset}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR10_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(
                path,
                format!(
                    "label byte {} > 9 at byte offset {}",
                    rec[0],
                    i * CIFAR10_RECORD
                ),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Serializes images (`u8`, channel-planar 3×32×32) and labels as CIFAR-10
/// binary records.
pub fn encode_cifar10_records(pixels: &[u8], labels: &[u8]) -> Result<Vec<u8>> {
    let per = CIFAR10_RECORD - 1;
    if pixels.len() != labels.len() * per {
        return Err(Error::Dimension(format!(
            "{} pixel bytes for {} records of {per}",
            pixels.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR10_RECORD);
    for (l, img) in labels.iter().zip(pixels.chunks_exact(per)) {
        out.push(*l);
        out.extend_from_slice(img);
    }
    Ok(out)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10_binary<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for name in CIFAR10_TRAIN_FILES {
        let path = dir.join(name);
        let (p, l) = parse_cifar10_records(&read(&path)?, &path)?;
        raw.extend(p);
        labels.extend(l);
    }
    let test_path = dir.join(CIFAR10_TEST_FILE);
    let (test_raw, test_labels) = parse_cifar10_records(&read(&test_path)?, &test_path)?;
    let shape = |n| vec![n, 3, 32, 32];
    let train = Dataset::from_raw(&raw, shape(labels.len()), labels, 10, Split::Train, None)?;
    let test = Dataset::from_raw(
        &test_raw,
        shape(test_labels.len()),
        test_labels,
        10,
        Split::Test,
        Some(train.stats()),
    )?;
    Ok((train, test))
}

pub fn cifar10_files(dir: &Path) -> Vec<PathBuf> {
    CIFAR10_TRAIN_FILES
        .iter()
        .chain(std::iter::once(&CIFAR10_TEST_FILE))
        .map(|n| dir.join(n))
        .collect()
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, format!("truncated header at byte offset {at}")))
}

fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, [usize; 3])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let h = be_u32(bytes, 8, path)? as usize;
    let w = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * h * w || n * h * w == 0 {
        return Err(Error::format(
            path,
            format!(
                "header declares {n}×{h}×{w} pixels but payload has {} bytes",
                body.len()
            ),
        ));
    }
    Ok((body.iter().map(|&p| p as f64 / 255.0).collect(), [n, h, w]))
}

fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(
            path,
            format!(
                "header declares {n} labels but payload has {} bytes",
                body.len()
            ),
        ));
    }
    Ok(body.iter().map(|&l| l as usize).collect())
}

fn read_idx_pair(images: &Path, labels: &Path) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    let (raw, [n, h, w]) = parse_idx_images(&read(images)?, images)?;
    let lbl = parse_idx_labels(&read(labels)?, labels)?;
    if lbl.len() != n {
        return Err(Error::format(
            labels,
            format!(
                "{} labels for {n} images in {}",
                lbl.len(),
                images.display()
            ),
        ));
    }
    Ok((raw, vec![n, 1, h, w], lbl))
}

/// Loads an IDX image/label file pair (grayscale, `C = 1`), normalized
/// with its own statistics.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let (raw, shape, lbl) = read_idx_pair(images, labels)?;
    let classes = lbl.iter().max().map_or(1, |m| m + 1);
    Dataset::from_raw(&raw, shape, lbl, classes, Split::Train, None)
}

/// Loads train and test IDX pairs; the test split reuses training
/// statistics.
pub fn load_idx_splits<T: Scalar>(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
) -> Result<(Dataset<T>, Dataset<T>)> {
    let (raw, shape, lbl) = read_idx_pair(train_images, train_labels)?;
    let (traw, tshape, tlbl) = read_idx_pair(test_images, test_labels)?;
    if shape[1..] != tshape[1..] {
        return Err(Error::format(
            test_images,
            format!(
                "image size {:?} differs from training {:?}",
                &tshape[1..],
                &shape[1..]
            ),
        ));
    }
    let classes = lbl.iter().chain(&tlbl).max().map_or(1, |m| m + 1);
    let train = Dataset::from_raw(&raw, shape, lbl, classes, Split::Train, None)?;
    let test = Dataset::from_raw(
        &traw,
        tshape,
        tlbl,
        classes,
        Split::Test,
        Some(train.stats()),
    )?;
    Ok((train, test))
}

/// Serializes an IDX image file (`u8` pixels, `n×h×w`).
pub fn encode_idx_images(pixels: &[u8], n: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Gaussian blobs with unit variance around seeded centers whose pairwise
/// distances are all at least `separation`. Train and test each hold
/// `n_per_class` points per class, class-interleaved.
pub fn synthetic_blobs<T: Scalar>(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(separation > 0.0) {
        return Err(Error::Usage(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if num_classes == 0 || n_per_class == 0 || dim == 0 {
        return Err(Error::Usage(
            "num_classes, n_per_class and dim must be positive".into(),
        ));
    }
    let mut rng = RngStream::new(seed, StreamPath::new(Purpose::Data));
    // rejection-sample centers on a box that grows with every failed draw
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut radius = separation;
    while centers.len() < num_classes {
        let cand: Vec<f64> = (0..dim)
            .map(|_| radius * (2.0 * rng.uniform() - 1.0))
            .collect();
        let ok = centers.iter().all(|c| {
            c.iter()
                .zip(&cand)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= separation
        });
        if ok {
            centers.push(cand);
        } else {
            radius *= 1.01;
        }
    }
    let mut draw = || {
        let n = num_classes * n_per_class;
        let mut raw = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n_per_class {
            for (c, center) in centers.iter().enumerate() {
                raw.extend(center.iter().map(|m| m + rng.normal()));
                labels.push(c);
            }
        }
        (raw, vec![n, dim], labels)
    };
    let (raw, shape, labels) = draw();
    let (traw, tshape, tlabels) = draw();
    let train = Dataset::from_raw(&raw, shape, labels, num_classes, Split::Train, None)?;
    let test = Dataset::from_raw(
        &traw,
        tshape,
        tlabels,
        num_classes,
        Split::Test,
        Some(train.stats()),
    )?;
    Ok((train, test))
}

/// Parameters of the synthetic image generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub size: usize,
    /// Standard deviation of per-pixel Gaussian noise, in `[0, 1]` pixel units.
    pub pixel_noise: f64,
    /// Maximum random translation of the class template, in pixels.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 500,
            test_per_class: 100,
            channels: 3,
            size: 32,
            pixel_noise: 0.25,
            max_shift: 3,
            seed: 0,
        }
    }
}

/// (kx, ky, phase, amplitude)
type Wave = (f64, f64, f64, f64);

/// Class-conditional texture images quantized to `u8`: each class owns a
/// smooth random template (a sum of low-frequency plane waves per
/// channel); samples are randomly shifted, contrast-jittered copies with
/// per-pixel noise. Returns `(pixels, labels)` for train and test in
/// CIFAR-10 record layout (channel-planar).
pub fn synthetic_pattern_bytes(spec: &PatternSpec) -> Result<[(Vec<u8>, Vec<u8>); 2]> {
    if spec.num_classes == 0 || spec.num_classes > 256 || spec.channels == 0 || spec.size == 0 {
        return Err(Error::Usage("invalid synthetic pattern geometry".into()));
    }
    let s = spec.size;
    let waves = 4;
    let mut rng = RngStream::new(spec.seed, StreamPath::new(Purpose::Data));
    // template[c][ch] = list of plane waves
    let templates: Vec<Vec<Vec<Wave>>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.channels)
                .map(|_| {
                    (0..waves)
                        .map(|_| {
                            let kx = (rng.below(4) as f64 + 1.0) * std::f64::consts::TAU / s as f64;
                            let ky = (rng.below(4) as f64) * std::f64::consts::TAU / s as f64;
                            let flip = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                            (
                                kx * flip,
                                ky,
                                rng.uniform() * std::f64::consts::TAU,
                                0.5 + rng.uniform(),
                            )
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let render = |per_class: usize, purpose_epoch: u64| {
        let mut rng = RngStream::new(
            spec.seed,
            StreamPath::new(Purpose::Data).epoch(purpose_epoch),
        );
        let n = per_class * spec.num_classes;
        let mut pixels = Vec::with_capacity(n * spec.channels * s * s);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..per_class {
            for (class, tmpl) in templates.iter().enumerate() {
                let span = 2 * spec.max_shift as u64 + 1;
                let dx = rng.below(span) as f64 - spec.max_shift as f64;
                let dy = rng.below(span) as f64 - spec.max_shift as f64;
                let contrast = 0.7 + 0.6 * rng.uniform();
                let offset = 0.15 * rng.normal();
                for ch in tmpl {
                    for y in 0..s {
                        for x in 0..s {
                            let (fx, fy) = (x as f64 + dx, y as f64 + dy);
                            let v: f64 = ch
                                .iter()
                                .map(|&(kx, ky, ph, a)| a * (kx * fx + ky * fy + ph).sin())
                                .sum::<f64>()
                                / waves as f64;
                            let p = 0.5
                                + 0.35 * contrast * v
                                + offset
                                + spec.pixel_noise * rng.normal();
                            pixels.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
                        }
                    }
                }
                labels.push(class as u8);
            }
        }
        (pixels, labels)
    };
    Ok([
        render(spec.train_per_class, 1),
        render(spec.test_per_class, 2),
    ])
}

/// Synthetic pattern images as normalized datasets.
pub fn synthetic_patterns<T: Scalar>(spec: &PatternSpec) -> Result<(Dataset<T>, Dataset<T>)> {
    let [(train_px, train_l), (test_px, test_l)] = synthetic_pattern_bytes(spec)?;
    let shape = |n: usize| vec![n, spec.channels, spec.size, spec.size];
    let to_raw = |px: &[u8]| px.iter().map(|&p| p as f64 / 255.0).collect::<Vec<_>>();
    let to_labels = |l: &[u8]| l.iter().map(|&v| v as usize).collect::<Vec<_>>();
    let train = Dataset::from_raw(
        &to_raw(&train_px),
        shape(train_l.len()),
        to_labels(&train_l),
        spec.num_classes,
        Split::Train,
        None,
    )?;
    let test = Dataset::from_raw(
        &to_raw(&test_px),
        shape(test_l.len()),
        to_labels(&test_l),
        spec.num_classes,
        Split::Test,
        Some(train.stats()),
    )?;
    Ok((train, test))
}

/// Class-stratified deterministic subsample of `n` items. Per-class quotas
/// are proportional to class frequency (largest remainder, ties toward the
/// lower class index); the result keeps the original item order.
pub fn subsample<T: Scalar>(ds: &Dataset<T>, n: usize, seed: u64) -> Result<Dataset<T>> {
    let counts = ds.class_counts();
    let present = counts.iter().filter(|&&c| c > 0).count();
    if n < present {
        return Err(Error::Usage(format!(
            "subsample of {n} cannot cover {present} classes"
        )));
    }
    if n > ds.len() {
        return Err(Error::Usage(format!(
            "subsample of {n} exceeds dataset size {}",
            ds.len()
        )));
    }
    let total = ds.len();
    let mut quotas: Vec<usize> = counts.iter().map(|&c| c * n / total).collect();
    let mut short = n - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // largest fractional remainder first
    order.sort_by_key(|&c| std::cmp::Reverse((counts[c] * n) % total));
    for c in order {
        if short == 0 {
            break;
        }
        if quotas[c] < counts[c] {
            quotas[c] += 1;
            short -= 1;
        }
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keep = Vec::with_capacity(n);
    for (c, idx) in by_class.iter_mut().enumerate() {
        let mut rng = RngStream::new(seed, StreamPath::new(Purpose::Subsample).sample(c as u64));
        shuffle(idx, &mut rng);
        keep.extend_from_slice(&idx[..quotas[c]]);
    }
    keep.sort_unstable();
    ds.select(&keep)
}

/// Fisher–Yates shuffle driven by a stream.
pub fn shuffle<X>(items: &mut [X], rng: &mut RngStream) {
    for i in (1..items.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        items.swap(i, j);
    }
}
