//! Datasets: the CIFAR-10 binary format, seeded splitting and subsetting,
//! horizontal flips, and a synthetic corpus with known frequency content.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by 3072 pixel bytes (R plane, G plane, B plane).
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Images in `[0, 1]` with labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        if images
            .iter()
            .any(|im| im.data().iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::InvalidArgument(
                "dataset pixels must lie in [0, 1]".into(),
            ));
        }
        Ok(Dataset {
            images,
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

    /// Subset at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Parses one file of 3073-byte CIFAR-10 records, preserving record order.
pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_records(&bytes, path)
}

pub fn parse_cifar10_records(bytes: &[u8], origin: &Path) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(
            origin,
            format!(
                "size {} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        ));
    }
    let shape = [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE];
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(
                origin,
                format!("record {i}: label byte {label} > 9"),
            ));
        }
        labels.push(label);
        images.push(Tensor::from_fn(&shape, |j| rec[1 + j] as f64 / 255.0));
    }
    Ok(Dataset {
        images,
        labels,
        classes: CIFAR_CLASSES,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

/// Loads the five training batches (50 000 images) or the test batch (10 000)
/// from a directory holding the binary distribution.
pub fn load_cifar10(dir: &Path, split: CifarSplit) -> Result<Dataset> {
    let files: &[&str] = match split {
        CifarSplit::Train => &CIFAR_TRAIN_FILES,
        CifarSplit::Test => &[CIFAR_TEST_FILE],
    };
    let mut all = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        classes: CIFAR_CLASSES,
    };
    for f in files {
        let part = load_cifar10_file(&dir.join(f))?;
        all.images.extend(part.images);
        all.labels.extend(part.labels);
    }
    Ok(all)
}

/// Encodes a 3×32×32 dataset in the CIFAR-10 record format. Pixels are
/// quantized as `round(255·v)`.
pub fn to_cifar10_records(dataset: &Dataset) -> Result<Vec<u8>> {
    let shape = [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE];
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD_BYTES);
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        img.expect_shape("cifar record", &shape)?;
        if label >= CIFAR_CLASSES {
            return Err(Error::LabelOutOfRange {
                label,
                classes: CIFAR_CLASSES,
            });
        }
        out.push(label as u8);
        out.extend(img.data().iter().map(|v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

/// Seeded permutation split: the first `⌊ratio·n⌋` shuffled indices go to train.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Stream::Split));
    let cut = (ratio * n as f64).floor() as usize;
    let val = idx.split_off(cut);
    Ok((idx, val))
}

pub fn split(dataset: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, va) = split_indices(dataset.len(), ratio, seed)?;
    Ok((dataset.select(&tr), dataset.select(&va)))
}

/// Uniform sample of `per_class` examples from every class. Output keeps the
/// original relative order of the chosen examples.
pub fn take_subset(dataset: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    let mut rng = rng::keyed(seed, Stream::Split, 0x5ab5e7, 0);
    let mut chosen = Vec::with_capacity(per_class * dataset.classes);
    for c in 0..dataset.classes {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == c)
            .collect();
        if members.len() < per_class {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} examples, {per_class} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.sort_unstable();
    Ok(dataset.select(&chosen))
}

/// Mirrors every plane left-to-right.
pub fn hflip(image: &Tensor) -> Tensor {
    let s = image.shape();
    let w = s[s.len() - 1];
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Horizontal flip with probability 1/2, decided by `rng`.
pub fn random_hflip<R: Rng + ?Sized>(image: &Tensor, rng: &mut R) -> Tensor {
    if rng.random::<bool>() {
        hflip(image)
    } else {
        image.clone()
    }
}

/// Class-specific tone `(u, v)` in cycles per image along x and y. Spread from
/// low to high frequency so low-pass filtering removes classes progressively.
pub const SYNTH_PRIMARY_FREQS: [(i32, i32); 10] = [
    (3, 1),
    (1, 4),
    (6, 2),
    (2, 7),
    (8, 5),
    (10, 3),
    (4, 11),
    (12, 9),
    (14, 5),
    (6, 15),
];

/// Secondary low-frequency tones, distinct up to sign.
pub const SYNTH_LOW_FREQS: [(i32, i32); 10] = [
    (1, 0),
    (0, 1),
    (1, 1),
    (1, -1),
    (2, 0),
    (0, 2),
    (2, 1),
    (1, 2),
    (2, -1),
    (1, -2),
];

/// Synthetic images: `0.5 + A·cos(tone_c) [+ B·cos(low_tone)] + noise·U(−1, 1)`,
/// clamped to `[0, 1]`, identical tone on all three channels and a random phase
/// per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub side: usize,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
    /// Amplitude `A` of the class tone from [`SYNTH_PRIMARY_FREQS`].
    pub amplitude: f64,
    /// Amplitude `B` of the optional second tone from [`SYNTH_LOW_FREQS`]; 0 disables it.
    pub low_amplitude: f64,
    /// Probability that the low tone carries the true class; otherwise it is
    /// drawn from a uniformly random class.
    pub low_reliability: f64,
    /// Random phase per image (otherwise phase 0).
    pub random_phase: bool,
    /// Adds the low tone of a different random class with amplitude
    /// `low_distractor·u·B`, `u ~ U[0, 1)`, so some images sit near the
    /// boundary between two low-tone classes; 0 disables it.
    pub low_distractor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            side: CIFAR_SIDE,
            noise: 0.1,
            amplitude: 0.3,
            low_amplitude: 0.0,
            low_reliability: 1.0,
            random_phase: true,
            low_distractor: 0.0,
        }
    }
}

impl SynthConfig {
    /// Stand-in for CIFAR-10 in the trend experiments. The faint class tone is
    /// always right; the stronger low tone is right 85 % of the time and
    /// competes with a distractor, so some clean images sit near a decision
    /// boundary and natural training has fragile features to lean on.
    pub fn two_tone() -> Self {
        SynthConfig {
            side: CIFAR_SIDE,
            noise: 0.02,
            amplitude: 0.12,
            low_amplitude: 0.25,
            low_reliability: 0.85,
            random_phase: false,
            low_distractor: 1.0,
        }
    }
}

/// `n_per_class` images for each of `classes` (2..=10) classes, class-major order.
pub fn synth_dataset(n_per_class: usize, classes: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with(n_per_class, classes, seed, &SynthConfig::default())
}

pub fn synth_dataset_with(
    n_per_class: usize,
    classes: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Dataset> {
    if !(2..=10).contains(&classes) {
        return Err(Error::InvalidArgument(format!(
            "synthetic datasets support 2..=10 classes, got {classes}"
        )));
    }
    if !(0.0..=1.0).contains(&cfg.low_distractor) || !(0.0..=1.0).contains(&cfg.low_reliability) {
        return Err(Error::InvalidArgument(
            "low_distractor and low_reliability must lie in [0, 1]".into(),
        ));
    }
    let n = cfg.side;
    let mut rng = rng::stream(seed, Stream::Synth);
    let mut images = Vec::with_capacity(n_per_class * classes);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for c in 0..classes {
        for _ in 0..n_per_class {
            let phase = if cfg.random_phase {
                rng.random::<f64>() * 2.0 * PI
            } else {
                0.0
            };
            let low_class = if rng.random::<f64>() < cfg.low_reliability {
                c
            } else {
                rng.random_range(0..classes)
            };
            let low_phase = if cfg.random_phase {
                rng.random::<f64>() * 2.0 * PI
            } else {
                0.0
            };
            // (class, relative amplitude) of the competing low tone.
            let distractor = if cfg.low_distractor > 0.0 {
                let other = (low_class + rng.random_range(1..classes)) % classes;
                Some((other, cfg.low_distractor * rng.random::<f64>()))
            } else {
                None
            };
            let (u, v) = SYNTH_PRIMARY_FREQS[c];
            let (lu, lv) = SYNTH_LOW_FREQS[low_class];
            let mut plane = vec![0.0; n * n];
            for y in 0..n {
                for x in 0..n {
                    let t = 2.0 * PI / n as f64;
                    let primary = (t * (u as f64 * x as f64 + v as f64 * y as f64) + phase).cos();
                    let low_tone = |(fu, fv): (i32, i32)| {
                        (t * (fu as f64 * x as f64 + fv as f64 * y as f64) + low_phase).cos()
                    };
                    let mut low = low_tone((lu, lv));
                    if let Some((other, rel)) = distractor {
                        low += rel * low_tone(SYNTH_LOW_FREQS[other]);
                    }
                    plane[y * n + x] = 0.5 + cfg.amplitude * primary + cfg.low_amplitude * low;
                }
            }
            let img = Tensor::from_fn(&[CIFAR_CHANNELS, n, n], |i| {
                let noise = if cfg.noise > 0.0 {
                    cfg.noise * (2.0 * rng.random::<f64>() - 1.0)
                } else {
                    0.0
                };
                (plane[i % (n * n)] + noise).clamp(0.0, 1.0)
            });
            images.push(img);
            labels.push(c);
        }
    }
    Dataset::new(images, labels, classes)
}
