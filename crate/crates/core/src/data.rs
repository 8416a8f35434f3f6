//! Image datasets: the CIFAR-10 binary format, seeded synthetic sets and
//! the two-way search split.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{Scalar, Tensor};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
/// Conventional per-channel CIFAR-10 statistics (RGB).
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Standardized images `[N, C, S, S]` with labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// Per-channel constants subtracted from and divided into the raw values.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.image_len() {
            return Err(Error::InvalidArgument(format!(
                "{}: {} pixel values for {} images of {} values",
                self.name,
                self.images.len(),
                self.len(),
                self.image_len()
            )));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.classes) {
            return Err(Error::InvalidArgument(format!(
                "{}: label {l} of sample {i} is outside 0..{}",
                self.name, self.classes
            )));
        }
        Ok(())
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            classes: self.classes,
            channels: self.channels,
            size: self.size,
            images: Vec::new(),
            labels: Vec::new(),
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    /// Stacks the samples at `indices` into an `[N, C, S, S]` tensor.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        let shape = vec![indices.len(), self.channels, self.size, self.size];
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }

    /// A random sample of `n` images (all of them when `n ≥ len`).
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, Purpose::Subset, &[]));
        idx.truncate(n.min(self.len()));
        idx.sort();
        self.subset(&idx)
    }

    fn standardize(&mut self) {
        let plane = self.size * self.size;
        for (k, v) in self.images.iter_mut().enumerate() {
            let ch = (k / plane) % self.channels;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
    }
}

/// Splits `ds` into two disjoint halves of ⌊N/2⌋ samples by a seeded
/// permutation. Returns whether a sample was dropped to make N even.
pub fn split_half(ds: &Dataset, seed: u64) -> (Dataset, Dataset, bool) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Split, &[]));
    let half = ds.len() / 2;
    let (a, b) = (&idx[..half], &idx[half..2 * half]);
    (ds.subset(a), ds.subset(b), ds.len() % 2 == 1)
}

/// Decodes concatenated 3073-byte records: a label byte, then 1024 bytes
/// each of the R, G and B planes in row-major order.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format {
            path: path.into(),
            reason: format!(
                "size {} is not a multiple of {CIFAR_RECORD}; trailing partial record at byte {whole}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("label {label} > 9 at byte {}", r * CIFAR_RECORD),
            });
        }
        labels.push(label as usize);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarSplit {
    Train,
    Test,
}

/// Loads the published binary batches from `dir`.
pub fn load_cifar10(dir: &Path, split: CifarSplit) -> Result<Dataset> {
    let files: Vec<String> = match split {
        CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        CifarSplit::Test => vec!["test_batch.bin".into()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (im, lb) = parse_cifar10(&bytes, &path)?;
        images.extend(im);
        labels.extend(lb);
    }
    let mut ds = Dataset {
        name: "cifar10".into(),
        classes: 10,
        channels: 3,
        size: CIFAR_SIDE,
        images,
        labels,
        mean: CIFAR_MEAN.to_vec(),
        std: CIFAR_STD.to_vec(),
    };
    ds.standardize();
    Ok(ds)
}

/// Synthetic image families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthPreset {
    /// One Gaussian bump per class at a class-specific position and colour,
    /// plus mild pixel noise. Separable by a linear model.
    EasyFit,
    /// Sinusoidal gratings whose orientation is the class, with random
    /// phase and additive noise. The class mean image is flat, so a linear
    /// model on pixels is near chance.
    Texture,
}

impl SynthPreset {
    pub fn name(self) -> &'static str {
        match self {
            SynthPreset::EasyFit => "easy-fit",
            SynthPreset::Texture => "texture",
        }
    }
}

struct Bump {
    cy: f64,
    cx: f64,
    colour: [f64; 3],
}

/// Seeded synthetic dataset with 3 channels, `size`×`size` pixels and
/// labels balanced within one sample per class.
pub fn synth_dataset(preset: SynthPreset, seed: u64, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    Ok(synth_pair(preset, seed, n, 0, classes, size)?.0)
}

/// Training and test sets drawn from the same class prototypes. Each part
/// is balanced on its own and both are standardized with the training
/// statistics. The training part equals `synth_dataset` with the same
/// arguments.
pub fn synth_pair(
    preset: SynthPreset,
    seed: u64,
    train_n: usize,
    test_n: usize,
    classes: usize,
    size: usize,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 classes".into()));
    }
    if train_n < classes {
        return Err(Error::InvalidArgument(format!("n = {train_n} is smaller than classes = {classes}")));
    }
    if size < 4 {
        return Err(Error::InvalidArgument("synthetic images need size ≥ 4".into()));
    }
    let mut r = rng::stream(seed, Purpose::Synth, &[]);
    let mut labels: Vec<usize> = (0..train_n).map(|i| i % classes).collect();
    labels.shuffle(&mut r);
    let s = size as f64;
    let bumps: Vec<Bump> = (0..classes)
        .map(|_| Bump {
            cy: r.random_range(0.2..0.8) * s,
            cx: r.random_range(0.2..0.8) * s,
            colour: [r.random_range(0.2..1.0), r.random_range(0.2..1.0), r.random_range(0.2..1.0)],
        })
        .collect();
    let train_images = render(preset, &bumps, &labels, classes, size, &mut r);
    let plane = size * size;
    let mut mean = vec![0f32; 3];
    let mut std = vec![0f32; 3];
    for ch in 0..3 {
        let vals = (0..train_n).flat_map(|i| train_images[(i * 3 + ch) * plane..(i * 3 + ch + 1) * plane].iter());
        let (sum, sq, cnt) = vals.fold((0f64, 0f64, 0usize), |(s, q, c), &v| (s + v as f64, q + (v as f64).powi(2), c + 1));
        let m = sum / cnt as f64;
        mean[ch] = m as f32;
        std[ch] = ((sq / cnt as f64 - m * m).max(1e-12)).sqrt() as f32;
    }
    let mut test_labels: Vec<usize> = (0..test_n).map(|i| i % classes).collect();
    test_labels.shuffle(&mut r);
    let test_images = render(preset, &bumps, &test_labels, classes, size, &mut r);
    let make = |images, labels| {
        let mut ds = Dataset {
            name: preset.name().into(),
            classes,
            channels: 3,
            size,
            images,
            labels,
            mean: mean.clone(),
            std: std.clone(),
        };
        ds.standardize();
        ds
    };
    Ok((make(train_images, labels), make(test_images, test_labels)))
}

fn render(preset: SynthPreset, bumps: &[Bump], labels: &[usize], classes: usize, size: usize, r: &mut impl Rng) -> Vec<f32> {
    let s = size as f64;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let plane = size * size;
    let mut images = vec![0f32; labels.len() * 3 * plane];
    for (i, &label) in labels.iter().enumerate() {
        let img = &mut images[i * 3 * plane..(i + 1) * 3 * plane];
        match preset {
            SynthPreset::EasyFit => {
                let b = &bumps[label];
                let width = 0.18 * s;
                let (jy, jx) = (r.random_range(-0.5..0.5), r.random_range(-0.5..0.5));
                for y in 0..size {
                    for x in 0..size {
                        let dy = y as f64 - b.cy - jy;
                        let dx = x as f64 - b.cx - jx;
                        let g = (-(dy * dy + dx * dx) / (2.0 * width * width)).exp();
                        for ch in 0..3 {
                            let v = 0.5 * b.colour[ch] * g + 0.1 + 0.05 * noise.sample(r);
                            img[ch * plane + y * size + x] = v as f32;
                        }
                    }
                }
            }
            SynthPreset::Texture => {
                let theta = PI * label as f64 / classes as f64;
                let (cy, cx) = (theta.cos(), theta.sin());
                let freq = 2.0 * PI / 4.0;
                let phase = r.random_range(0.0..2.0 * PI);
                let amp = r.random_range(0.3..0.5);
                let tint: [f64; 3] = [r.random_range(0.6..1.0), r.random_range(0.6..1.0), r.random_range(0.6..1.0)];
                for y in 0..size {
                    for x in 0..size {
                        let wave = (freq * (cy * y as f64 + cx * x as f64) + phase).sin();
                        for ch in 0..3 {
                            let v = 0.5 + amp * tint[ch] * wave + 0.15 * noise.sample(r);
                            img[ch * plane + y * size + x] = v as f32;
                        }
                    }
                }
            }
        }
    }
    images
}
