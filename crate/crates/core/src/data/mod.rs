//! Datasets, file formats, splitting and augmentation.

mod cifar;
mod idx;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cifar::{load_cifar10, parse_cifar_records, CIFAR_RECORD};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_mnist, load_mnist_idx, parse_idx_images, parse_idx_labels,
    read_maybe_gz, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// How pixel values were mapped.
#[derive(Debug, Clone, PartialEq)]
pub enum Normalization {
    /// Raw bytes divided by 255.
    UnitRange,
    /// Unit range followed by per-channel `(x − mean) / std`.
    Standardized(ChannelStats),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: SplitTag,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, n_classes: usize, split: SplitTag) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidShape(format!("images must be [n, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch(format!("{} images, {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidData(format!("label {bad} outside 0..{n_classes}")));
        }
        Ok(Self { images, labels, n_classes, split, normalization: Normalization::UnitRange })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        let (c, h, w) = self.image_shape();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let (c, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        // an empty selection is a valid (empty) batch
        let images = Tensor::from_parts(vec![indices.len(), c, h, w], data);
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Self {
        let (images, labels) = self.batch(indices);
        Self { images, labels, n_classes: self.n_classes, split, normalization: self.normalization.clone() }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let (c, h, w) = self.image_shape();
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.images.data().chunks(c * plane) {
            for (ch, px) in img.chunks(plane).enumerate() {
                for &v in px {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-8)).collect();
        ChannelStats { mean, std }
    }

    /// Applies `(x − mean) / std` per channel. Stats normally come from the
    /// training split and are reused for every other split.
    pub fn standardize(&mut self, stats: &ChannelStats) -> Result<()> {
        let (c, h, w) = self.image_shape();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::ShapeMismatch(format!("{} channel stats for {c} channels", stats.mean.len())));
        }
        if self.normalization != Normalization::UnitRange {
            return Err(Error::InvalidData("dataset is already standardized".into()));
        }
        let plane = h * w;
        for img in self.images.data_mut().chunks_mut(c * plane) {
            for (ch, px) in img.chunks_mut(plane).enumerate() {
                let (m, s) = (stats.mean[ch], stats.std[ch]);
                for v in px {
                    *v = ((*v as f64 - m) / s) as f32;
                }
            }
        }
        self.normalization = Normalization::Standardized(stats.clone());
        Ok(())
    }
}

/// Deterministic shuffled partition into `(train, val)` of the given sizes.
pub fn split(data: &Dataset, sizes: (usize, usize), seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = sizes;
    if a.checked_add(b).map_or(true, |t| t > data.len()) {
        return Err(Error::InvalidSizes(format!("{a} + {b} from {} samples", data.len())));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((data.subset(&order[..a], SplitTag::Train), data.subset(&order[a..a + b], SplitTag::Val)))
}

/// Training-time augmentation. Standardization is applied to whole datasets
/// (see [`Dataset::standardize`]); the flag records that the run uses it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentPolicy {
    pub mirror: bool,
    /// Reflect-pad by this many pixels and crop back at a random offset.
    pub shift: usize,
    pub standardize: bool,
}

impl AugmentPolicy {
    pub const NONE: Self = Self { mirror: false, shift: 0, standardize: false };
    pub const CIFAR: Self = Self { mirror: true, shift: 4, standardize: true };

    pub fn is_identity(&self) -> bool {
        !self.mirror && self.shift == 0
    }
}

/// Mirrors `[C, H, W]` in place along the width.
pub fn mirror_image(img: &mut [f32], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_mut(w) {
        row.reverse();
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Crop of the reflect-padded image at offset `(dy, dx)` relative to the
/// original top-left corner, each in `[−shift, shift]`.
pub fn shift_image(img: &[f32], c: usize, h: usize, w: usize, dy: isize, dx: isize) -> Vec<f32> {
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let si = reflect(i as isize + dy, h);
            for j in 0..w {
                out.push(plane[si * w + reflect(j as isize + dx, w)]);
            }
        }
    }
    out
}

/// Random mirror (probability ½) and shift per image of a `[B, C, H, W]` batch.
pub fn augment(batch: &Tensor<f32>, policy: &AugmentPolicy, rng: &mut impl Rng) -> Tensor<f32> {
    if policy.is_identity() {
        return batch.clone();
    }
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let n = c * h * w;
    let mut out = batch.clone();
    let shift = policy.shift as isize;
    for img in out.data_mut().chunks_mut(n) {
        if policy.mirror && rng.gen_bool(0.5) {
            mirror_image(img, c, h, w);
        }
        if shift > 0 {
            let dy = rng.gen_range(-shift..=shift);
            let dx = rng.gen_range(-shift..=shift);
            let shifted = shift_image(img, c, h, w, dy, dx);
            img.copy_from_slice(&shifted);
        }
    }
    out
}

/// Class-dependent patterns in noise: each class lights a fixed random
/// subset of cells on a 4×4 grid. Values stay in `[0, 1]`.
pub fn synthetic(n: usize, n_classes: usize, shape: (usize, usize, usize), seed: u64) -> Result<Dataset> {
    let (c, h, w) = shape;
    if n_classes == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidShape(format!("synthetic data {n_classes} classes of {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = 4usize;
    let templates: Vec<Vec<bool>> =
        (0..n_classes).map(|_| (0..grid * grid).map(|_| rng.gen_bool(0.5)).collect()).collect();
    let noise = Normal::new(0.0, 0.1).expect("valid");
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let label = s % n_classes;
        labels.push(label);
        for _ in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let cell = (i * grid / h) * grid + j * grid / w;
                    let base: f64 = if templates[label][cell] { 0.8 } else { 0.2 };
                    data.push((base + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let images = Tensor::new(&[n, c, h, w], data)?;
    Dataset::new(images, labels, n_classes, SplitTag::Train)
}
