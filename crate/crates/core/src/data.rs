//! Datasets: a synthetic Gaussian mixture, IDX and CIFAR-10 binary loaders,
//! channel normalization, image augmentation and seeded batching.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::InputShape;
use crate::rng::{self, tags};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const AUGMENT_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, ...input shape]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub input: InputShape,
    pub stats: ChannelStats,
    /// Random crop + flip during training (images only).
    pub augment: bool,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, input: InputShape) -> Result<Self> {
        let n = labels.len();
        if inputs.shape() != input.batch_shape(n).as_slice() {
            return Err(Error::shape("dataset", inputs.shape(), &input.batch_shape(n)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        let channels = channels_of(input);
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
            input,
            stats: ChannelStats::identity(channels),
            augment: matches!(input, InputShape::Image { .. }),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Inputs and labels of the given sample indices, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.input.numel();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(self.input.batch_shape(indices.len()), data)?, labels))
    }

    /// Per-channel statistics of this dataset's inputs.
    pub fn channel_stats(&self) -> ChannelStats {
        let channels = channels_of(self.input);
        let plane = self.input.numel() / channels;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for sample in self.inputs.data().chunks(self.input.numel().max(1)) {
            for (c, chunk) in sample.chunks(plane.max(1)).enumerate() {
                for &v in chunk {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (self.len() * plane) as f64;
        if count == 0.0 {
            return ChannelStats::identity(channels);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                // A constant channel is left unscaled.
                if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() }
            })
            .collect();
        ChannelStats { mean, std }
    }

    /// Normalizes in place with `stats` (typically the training split's).
    pub fn normalize_with(&mut self, stats: &ChannelStats) -> Result<()> {
        let channels = channels_of(self.input);
        if stats.mean.len() != channels || stats.std.len() != channels {
            return Err(Error::shape("normalize", &[channels], &[stats.mean.len()]));
        }
        let plane = (self.input.numel() / channels).max(1);
        let per = self.input.numel().max(1);
        for sample in self.inputs.data_mut().chunks_mut(per) {
            for (c, chunk) in sample.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v = (*v - stats.mean[c]) / stats.std[c];
                }
            }
        }
        self.stats = stats.clone();
        Ok(())
    }

    /// Normalizes with this dataset's own statistics and returns them.
    pub fn normalize(&mut self) -> Result<ChannelStats> {
        let stats = self.channel_stats();
        self.normalize_with(&stats)?;
        Ok(stats)
    }
}

fn channels_of(input: InputShape) -> usize {
    match input {
        InputShape::Vector(_) => 1,
        InputShape::Image { channels, .. } => channels,
    }
}

// ---- synthetic data ----

/// Gaussian mixture with separate per-class train and test counts.
///
/// Class `c` is `N(s · u_c, I)` for a seeded random unit direction `u_c`.
pub fn synth_gaussian_mixture_split(
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    input_dim: usize,
    class_separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("num_classes must be at least 2, got {num_classes}")));
    }
    if !(class_separation > 0.0) || input_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "class_separation must be positive and input_dim nonzero (got {class_separation}, {input_dim})"
        )));
    }
    let mut r = rng::stream(seed, &[tags::DATA]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..input_dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| class_separation * x / norm).collect()
        })
        .collect();

    let per_class = train_per_class + test_per_class;
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    // Interleave classes so neither split is sorted by label.
    for i in 0..per_class {
        for (c, center) in centers.iter().enumerate() {
            let dst = if i < train_per_class { &mut train } else { &mut test };
            dst.0.extend(center.iter().map(|m| m + r.sample::<f64, _>(StandardNormal)));
            dst.1.push(c);
        }
    }
    let input = InputShape::Vector(input_dim);
    let make = |(x, y): (Vec<f64>, Vec<usize>), split| {
        let n = y.len();
        Dataset::new(Tensor::new(vec![n, input_dim], x)?, y, num_classes, split, input)
    };
    Ok((make(train, Split::Train)?, make(test, Split::Test)?))
}

/// Gaussian mixture with a deterministic 80/20 train/test split per class.
pub fn synth_gaussian_mixture(
    num_classes: usize,
    samples_per_class: usize,
    input_dim: usize,
    class_separation: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let train = samples_per_class * 4 / 5;
    synth_gaussian_mixture_split(
        num_classes,
        train,
        samples_per_class - train,
        input_dim,
        class_separation,
        seed,
    )
}

// ---- IDX ----

/// Raw contents of one IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxFile {
    Images { rows: usize, cols: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

impl IdxFile {
    pub fn count(&self) -> usize {
        match self {
            IdxFile::Images { rows, cols, pixels } => pixels.len() / (rows * cols).max(1),
            IdxFile::Labels(l) => l.len(),
        }
    }
}

fn need(bytes: &[u8], len: usize) -> Result<()> {
    if bytes.len() < len {
        return Err(Error::Truncated {
            expected: len,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX image (`0x803`) or label (`0x801`) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    need(bytes, 8)?;
    let magic = BigEndian::read_u32(&bytes[..4]);
    let count = BigEndian::read_u32(&bytes[4..8]) as usize;
    match magic {
        IDX_LABELS_MAGIC => {
            need(bytes, 8 + count)?;
            Ok(IdxFile::Labels(bytes[8..8 + count].to_vec()))
        }
        IDX_IMAGES_MAGIC => {
            need(bytes, 16)?;
            let rows = BigEndian::read_u32(&bytes[8..12]) as usize;
            let cols = BigEndian::read_u32(&bytes[12..16]) as usize;
            let len = count * rows * cols;
            need(bytes, 16 + len)?;
            Ok(IdxFile::Images {
                rows,
                cols,
                pixels: bytes[16..16 + len].to_vec(),
            })
        }
        found => Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found,
        }),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxFile> {
    parse_idx(&read(path.as_ref())?)
}

/// Serializes back to the IDX byte layout.
pub fn encode_idx(file: &IdxFile) -> Vec<u8> {
    let mut out = Vec::new();
    let mut word = |v: u32| out.extend(v.to_be_bytes());
    match file {
        IdxFile::Labels(labels) => {
            word(IDX_LABELS_MAGIC);
            word(labels.len() as u32);
            out.extend(labels);
        }
        IdxFile::Images { rows, cols, pixels } => {
            word(IDX_IMAGES_MAGIC);
            word(file.count() as u32);
            word(*rows as u32);
            word(*cols as u32);
            out.extend(pixels);
        }
    }
    out
}

/// Pairs an image file with a label file; pixels are scaled to `[0, 1]`
/// but not normalized.
pub fn read_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    idx_dataset(read_idx(&images)?, read_idx(&labels)?, split)
}

pub fn idx_dataset(images: IdxFile, labels: IdxFile, split: Split) -> Result<Dataset> {
    let IdxFile::Images { rows, cols, pixels } = images else {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: IDX_LABELS_MAGIC,
        });
    };
    let IdxFile::Labels(raw_labels) = labels else {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: IDX_IMAGES_MAGIC,
        });
    };
    let n = pixels.len() / (rows * cols).max(1);
    if n != raw_labels.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: raw_labels.len(),
        });
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let input = InputShape::Image {
        channels: 1,
        height: rows,
        width: cols,
    };
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(Tensor::new(input.batch_shape(n), data)?, labels, num_classes, split, input)
}

/// IDX image/label pair, channel-normalized with its own statistics.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let mut ds = read_idx_pair(images, labels, split)?;
    ds.normalize()?;
    Ok(ds)
}

// ---- CIFAR-10 binary ----

/// Parses 3073-byte records (label, then R, G, B planes of 32×32); pixels
/// are scaled to `[0, 1]` but not normalized.
pub fn parse_cifar_binary(bytes: &[u8], split: Split) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::RecordLength {
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    let input = InputShape::Image {
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
    };
    let num_classes = labels.iter().max().map_or(10, |m| (m + 1).max(10));
    Dataset::new(Tensor::new(input.batch_shape(n), data)?, labels, num_classes, split, input)
}

/// Serializes raw `[0, 1]` CIFAR images back to 3073-byte records.
pub fn encode_cifar_binary(ds: &Dataset) -> Vec<u8> {
    let per = CIFAR_RECORD - 1;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (img, &label) in ds.inputs.data().chunks(per).zip(&ds.labels) {
        out.push(label as u8);
        out.extend(img.iter().map(|v| (v * 255.0).round() as u8));
    }
    out
}

pub fn read_cifar_binary(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    parse_cifar_binary(&read(path.as_ref())?, split)
}

/// CIFAR-10 binary file, channel-normalized with its own statistics.
pub fn load_cifar_binary(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let mut ds = read_cifar_binary(path, split)?;
    ds.normalize()?;
    Ok(ds)
}

// ---- augmentation ----

/// `H×W` window at `(dy, dx)` of the image zero-padded by `pad` on each side.
pub fn crop_padded(img: &[f64], channels: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(c * h + y) * w + x] = img[(c * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

pub fn flip_horizontal(img: &mut [f64], w: usize) {
    img.chunks_mut(w).for_each(<[f64]>::reverse);
}

/// Pad-4 random crop and horizontal flip with probability ½, seeded per
/// `(seed, epoch, first_index + i)`.
pub fn augment_batch(images: &Tensor, seed: u64, epoch: usize, first_index: usize) -> Result<Tensor> {
    let [b, c, h, w] = *images.shape() else {
        return Err(Error::InvalidArgument(format!(
            "augment_batch expects [b, C, H, W], got {:?}",
            images.shape()
        )));
    };
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!("images too small to augment: {h}x{w}")));
    }
    let per = c * h * w;
    let mut out = Vec::with_capacity(b * per);
    for (i, img) in images.data().chunks(per).enumerate() {
        let mut r = rng::stream(seed, &[tags::AUGMENT, epoch as u64, (first_index + i) as u64]);
        let dy = r.random_range(0..=2 * AUGMENT_PAD);
        let dx = r.random_range(0..=2 * AUGMENT_PAD);
        let mut cropped = crop_padded(img, c, h, w, AUGMENT_PAD, dy, dx);
        if r.random_bool(0.5) {
            flip_horizontal(&mut cropped, w);
        }
        out.extend(cropped);
    }
    Tensor::new(images.shape().to_vec(), out)
}

// ---- batching ----

/// Seeded permutation of `0..n` cut into batches; the last one may be short.
pub fn batch_iter(n: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(shuffle_seed, &[tags::SHUFFLE, epoch as u64]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 1];
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for v in [n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    #[test]
    fn mixture_sizes_and_determinism() {
        let (tr, te) = synth_gaussian_mixture(10, 500, 8, 3.0, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (4000, 1000));
        let mut hist = [0usize; 10];
        tr.labels.iter().for_each(|&y| hist[y] += 1);
        assert!(hist.iter().all(|&h| h == 400));
        let (tr2, te2) = synth_gaussian_mixture(10, 500, 8, 3.0, 1).unwrap();
        assert_eq!((tr, te), (tr2, te2));
        assert!(synth_gaussian_mixture(1, 5, 2, 1.0, 0).is_err());
        assert!(synth_gaussian_mixture(2, 5, 2, 0.0, 0).is_err());
    }

    #[test]
    fn well_separated_mixture_is_nearest_centroid_separable() {
        let (tr, te) = synth_gaussian_mixture(10, 200, 16, 40.0, 3).unwrap();
        let d = 16;
        let mut centroids = vec![vec![0.0; d]; 10];
        let mut counts = [0.0; 10];
        for (x, &y) in tr.inputs.data().chunks(d).zip(&tr.labels) {
            centroids[y].iter_mut().zip(x).for_each(|(c, v)| *c += v);
            counts[y] += 1.0;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let correct = te
            .inputs
            .data()
            .chunks(d)
            .zip(&te.labels)
            .filter(|(x, &y)| {
                let dist = |c: &Vec<f64>| c.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..10).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                best == y
            })
            .count();
        assert!(correct as f64 / te.len() as f64 > 0.99);
    }

    #[test]
    fn idx_labels_and_images() {
        assert_eq!(parse_idx(&idx_labels(&[0, 1, 2])).unwrap(), IdxFile::Labels(vec![0, 1, 2]));
        let pixels = [0u8, 51, 102, 153, 204, 255, 1, 2];
        let IdxFile::Images { rows, cols, pixels: got } = parse_idx(&idx_images(2, 2, 2, &pixels)).unwrap() else {
            panic!("expected images");
        };
        assert_eq!((rows, cols, got.as_slice()), (2, 2, &pixels[..]));

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        fs::write(&ip, idx_images(2, 2, 2, &pixels)).unwrap();
        fs::write(&lp, idx_labels(&[3, 1])).unwrap();
        let ds = read_idx_pair(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 1, 2, 2]);
        let expected: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
        assert_eq!(ds.inputs.data(), expected.as_slice());
        assert_eq!(ds.labels, vec![3, 1]);
        assert_eq!(ds.num_classes, 4);
    }

    #[test]
    fn idx_errors() {
        let mut bad = idx_labels(&[0]);
        bad[3] = 9;
        assert!(matches!(parse_idx(&bad), Err(Error::BadMagic { found: 0x809, .. })));
        let full = idx_images(2, 2, 2, &[0; 8]);
        assert!(matches!(
            parse_idx(&full[..full.len() - 1]),
            Err(Error::Truncated { expected: 24, found: 23 })
        ));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Truncated { .. })));

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        fs::write(&ip, idx_images(2, 2, 2, &[0; 8])).unwrap();
        fs::write(&lp, idx_labels(&[0, 1, 1])).unwrap();
        assert!(matches!(
            read_idx_pair(&ip, &lp, Split::Train),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
        assert!(matches!(read_idx(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    fn cifar_record(label: u8, f: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(f));
        r
    }

    #[test]
    fn cifar_records() {
        let ds = parse_cifar_binary(&cifar_record(7, |_| 255), Split::Train).unwrap();
        assert_eq!(ds.labels, vec![7]);
        assert!(ds.inputs.data().iter().all(|&v| v == 1.0));

        let empty = parse_cifar_binary(&[], Split::Test).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.inputs.shape(), &[0, 3, 32, 32]);

        // Plane index encoded in the byte: R plane = 10, G = 20, B = 30, plus a
        // position marker on the first row.
        let rec = |label, base: u8| {
            cifar_record(label, move |i| {
                let plane = i / 1024;
                let pos = i % 1024;
                base + 10 * (plane as u8 + 1) + if pos < 32 { pos as u8 % 5 } else { 0 }
            })
        };
        let mut bytes = rec(2, 0);
        bytes.extend(rec(9, 100));
        let ds = parse_cifar_binary(&bytes, Split::Train).unwrap();
        assert_eq!(ds.labels, vec![2, 9]);
        let px = |n: usize, c: usize, y: usize, x: usize| ds.inputs.data()[((n * 3 + c) * 32 + y) * 32 + x] * 255.0;
        assert!((px(0, 0, 5, 5) - 10.0).abs() < 1e-9);
        assert!((px(0, 2, 0, 3) - 33.0).abs() < 1e-9);
        assert!((px(1, 1, 31, 31) - 120.0).abs() < 1e-9);
        assert!((px(1, 0, 0, 4) - 114.0).abs() < 1e-9);

        assert!(matches!(
            parse_cifar_binary(&bytes[..3000], Split::Train),
            Err(Error::RecordLength { len: 3000, record: 3073 })
        ));
    }

    #[test]
    fn normalization_uses_training_stats() {
        let mut bytes = Vec::new();
        for k in 0..4u8 {
            bytes.extend(cifar_record(k, |i| ((i * 7 + k as usize * 13) % 256) as u8));
        }
        let mut train = parse_cifar_binary(&bytes, Split::Train).unwrap();
        let stats = train.normalize().unwrap();
        let after = train.channel_stats();
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-6);
            assert!((after.std[c] - 1.0).abs() < 1e-6);
        }
        let mut test = parse_cifar_binary(&bytes[..CIFAR_RECORD], Split::Test).unwrap();
        let raw = test.inputs.data()[0];
        test.normalize_with(&stats).unwrap();
        assert!((test.inputs.data()[0] - (raw - stats.mean[0]) / stats.std[0]).abs() < 1e-15);
        assert!(test.inputs.all_finite());
    }

    #[test]
    fn crop_and_flip_identities() {
        let img: Vec<f64> = (0..2 * 8 * 8).map(|v| v as f64).collect();
        assert_eq!(crop_padded(&img, 2, 8, 8, 4, 4, 4), img);
        let mut f = img.clone();
        flip_horizontal(&mut f, 8);
        assert_ne!(f, img);
        flip_horizontal(&mut f, 8);
        assert_eq!(f, img);
        // Shift by one row: first row is padding.
        let shifted = crop_padded(&img, 2, 8, 8, 4, 3, 4);
        assert!(shifted[..8].iter().all(|&v| v == 0.0));
        assert_eq!(&shifted[8..16], &img[..8]);
    }

    #[test]
    fn augmentation_replays_and_keeps_range() {
        let data: Vec<f64> = (0..3 * 3 * 8 * 8).map(|v| (v % 17) as f64 / 16.0).collect();
        let imgs = Tensor::new(vec![3, 3, 8, 8], data).unwrap();
        let a = augment_batch(&imgs, 5, 2, 10).unwrap();
        assert_eq!(a, augment_batch(&imgs, 5, 2, 10).unwrap());
        assert_ne!(a, augment_batch(&imgs, 5, 3, 10).unwrap());
        assert_eq!(a.shape(), imgs.shape());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let small = Tensor::zeros(vec![1, 1, 4, 4]);
        assert!(augment_batch(&small, 0, 0, 0).is_err());
    }

    #[test]
    fn batch_sizes() {
        let b = batch_iter(10, 4, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, batch_iter(10, 4, 1, 0).unwrap());
        assert_ne!(batch_iter(100, 4, 1, 0).unwrap(), batch_iter(100, 4, 1, 1).unwrap());
        assert!(batch_iter(10, 0, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn batches_partition_the_index_set(n in 0usize..300, bs in 1usize..50, seed in any::<u64>(), epoch in 0usize..10) {
            let mut all: Vec<usize> = batch_iter(n, bs, seed, epoch).unwrap().concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
