//! In-memory image datasets: a deterministic synthetic task and the standard
//! 3073-byte binary CIFAR-10 layout. Images are stored already normalized,
//! flat `[n, c, h, w]`; batches are materialized on demand with optional
//! horizontal flips.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use trimnet_tensor::{Element, Tensor};

use crate::{Error, Result};

/// Per-channel constants applied as `(value - mean) / std` after scaling
/// pixels to the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// Leaves unit-interval pixels untouched.
    pub fn identity() -> Self {
        Normalization { mean: [0.0; 3], std: [1.0; 3] }
    }

    /// Maps the unit interval to roughly [-1, 1].
    pub fn centered() -> Self {
        Normalization { mean: [0.5; 3], std: [0.5; 3] }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<E: Element> {
    images: Vec<E>,
    labels: Vec<usize>,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<E: Element> Dataset<E> {
    /// Wraps externally prepared flat images and labels after consistency
    /// checks.
    pub fn from_parts(
        images: Vec<E>,
        labels: Vec<usize>,
        classes: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let per = channels * height * width;
        if images.len() != labels.len() * per {
            return Err(Error::config(
                "images",
                format!("{} values cannot hold {} samples of {per}", images.len(), labels.len()),
            ));
        }
        if classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config("labels", format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset { images, labels, classes, channels, height, width })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// First `n` samples in stored order.
    pub fn truncate(&self, n: usize) -> Dataset<E> {
        let n = n.min(self.len());
        let per = self.channels * self.height * self.width;
        Dataset {
            images: self.images[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[E] {
        let s = self.channels * self.height * self.width;
        &self.images[i * s..(i + 1) * s]
    }

    /// Materializes `[B, C, H, W]` for the given sample indices. `flips[j]`
    /// mirrors sample `j` horizontally.
    pub fn batch(&self, idxs: &[usize], flips: Option<&[bool]>) -> Result<(Tensor<E>, Vec<usize>)> {
        if let Some(fl) = flips {
            if fl.len() != idxs.len() {
                return Err(Error::graph(format!(
                    "flip mask covers {} samples, batch has {}",
                    fl.len(),
                    idxs.len()
                )));
            }
        }
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = Vec::with_capacity(idxs.len() * c * h * w);
        let mut labels = Vec::with_capacity(idxs.len());
        for (j, &i) in idxs.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::graph(format!("sample index {i} out of range ({} samples)", self.len())));
            }
            let img = self.image(i);
            let flip = flips.map(|fl| fl[j]).unwrap_or(false);
            if flip {
                for ch in 0..c {
                    for y in 0..h {
                        let row = &img[(ch * h + y) * w..(ch * h + y + 1) * w];
                        data.extend(row.iter().rev());
                    }
                }
            } else {
                data.extend_from_slice(img);
            }
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![idxs.len(), c, h, w], data)?, labels))
    }

    /// Sequential batch starts covering the whole set (the eval iterator).
    pub fn chunks(&self, batch: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let n = self.len();
        (0..n.div_ceil(batch)).map(move |k| (k * batch..((k + 1) * batch).min(n)).collect())
    }
}

pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idxs: Vec<usize> = (0..n).collect();
    idxs.shuffle(rng);
    idxs
}

const SIDE: usize = 32;

/// The noiseless class patterns behind [`synth_dataset`]: a seeded mix of
/// base color, oriented grating, and a soft blob, all in the unit interval.
pub fn class_templates(seed: u64, classes: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x74656d706c617465);
    let mut out = Vec::with_capacity(classes);
    for _ in 0..classes {
        let base: [f64; 3] = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let freq: f64 = rng.gen_range(2.0..5.0);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let tex_w: [f64; 3] = [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)];
        let (cx, cy): (f64, f64) = (rng.gen_range(8.0..24.0), rng.gen_range(8.0..24.0));
        let radius: f64 = rng.gen_range(3.0..6.0);
        let blob_w: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];

        let (sin_t, cos_t) = theta.sin_cos();
        let mut img = vec![0.0f64; 3 * SIDE * SIDE];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let proj = (x as f64 * cos_t + y as f64 * sin_t) / SIDE as f64;
                let wave = 0.5 + 0.5 * (std::f64::consts::TAU * freq * proj + phase).sin();
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let blob = (-d2 / (2.0 * radius * radius)).exp();
                for c in 0..3 {
                    let v = 0.5 * base[c] + 0.3 * wave * tex_w[c] + 0.4 * blob * blob_w[c];
                    img[(c * SIDE + y) * SIDE + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        out.push(img);
    }
    out
}

/// Deterministic 32x32 RGB classification task. `noise` scales three
/// perturbations applied per sample: additive pixel noise, a circular
/// spatial shift, and a global amplitude wobble; at zero the images equal
/// their class template exactly. Labels are exactly uniform, which requires
/// `samples` to be a multiple of `classes`.
pub fn synth_dataset<E: Element>(
    seed: u64,
    classes: usize,
    samples: usize,
    noise: f64,
    norm: &Normalization,
) -> Result<Dataset<E>> {
    synth_split(seed, 0, classes, samples, noise, norm)
}

/// Like [`synth_dataset`] but with the sample stream decoupled from the
/// task: every `stream` of one `seed` shares the class templates while
/// drawing its own shuffles and perturbations, so held-out splits test the
/// same classification problem.
pub fn synth_split<E: Element>(
    seed: u64,
    stream: u64,
    classes: usize,
    samples: usize,
    noise: f64,
    norm: &Normalization,
) -> Result<Dataset<E>> {
    if classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    if samples == 0 || samples % classes != 0 {
        return Err(Error::config(
            "samples",
            format!("{samples} samples cannot be split evenly over {classes} classes"),
        ));
    }
    if !(0.0..=4.0).contains(&noise) || !noise.is_finite() {
        return Err(Error::config("noise", format!("amplitude {noise} outside [0, 4]")));
    }

    let templates = class_templates(seed, classes);
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ 0x73616d706c6573 ^ stream.wrapping_mul(0x9e3779b97f4a7c15));
    labels.shuffle(&mut rng);

    let pixel_noise = Normal::new(0.0, 1.0).expect("unit normal");
    let max_shift = (4.0 * noise).round() as i64;
    let mut images = Vec::with_capacity(samples * 3 * SIDE * SIDE);
    for &label in &labels {
        let t = &templates[label];
        let (dx, dy) = if max_shift > 0 {
            (rng.gen_range(-max_shift..=max_shift), rng.gen_range(-max_shift..=max_shift))
        } else {
            (0, 0)
        };
        let wobble = if noise > 0.0 { 1.0 + 0.3 * noise * rng.gen_range(-1.0..1.0) } else { 1.0 };
        for c in 0..3 {
            for y in 0..SIDE {
                let sy = (y as i64 - dy).rem_euclid(SIDE as i64) as usize;
                for x in 0..SIDE {
                    let sx = (x as i64 - dx).rem_euclid(SIDE as i64) as usize;
                    let mut v = t[(c * SIDE + sy) * SIDE + sx] * wobble;
                    if noise > 0.0 {
                        v += 0.25 * noise * pixel_noise.sample(&mut rng);
                    }
                    let v = v.clamp(0.0, 1.0);
                    images.push(E::from_f64((v - norm.mean[c]) / norm.std[c]));
                }
            }
        }
    }

    Ok(Dataset { images, labels, classes, channels: 3, height: SIDE, width: SIDE })
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_CLASSES: usize = 10;

/// Reads one or more files in the standard binary layout: records of one
/// label byte followed by 3072 pixel bytes (three 32x32 planes). Pixels are
/// scaled to the unit interval and channel-normalized.
pub fn ingest_cifar10<E: Element>(paths: &[&Path], norm: &Normalization) -> Result<Dataset<E>> {
    if paths.is_empty() {
        return Err(Error::config("dataset.paths", "no input files given"));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for &path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = (bytes.len() / CIFAR_RECORD) * CIFAR_RECORD;
            return Err(Error::format(
                path,
                format!(
                    "truncated record at byte offset {offset}: {} trailing bytes, record size is {CIFAR_RECORD}",
                    bytes.len() - offset
                ),
            ));
        }
        for (rec, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::format(
                    path,
                    format!("label {label} at byte offset {} exceeds class 9", rec * CIFAR_RECORD),
                ));
            }
            labels.push(label);
            for (i, &b) in chunk[1..].iter().enumerate() {
                let c = i / (SIDE * SIDE);
                let v = b as f64 / 255.0;
                images.push(E::from_f64((v - norm.mean[c]) / norm.std[c]));
            }
            debug_assert_eq!(chunk[1..].len(), CIFAR_PIXELS);
        }
    }
    Ok(Dataset { images, labels, classes: CIFAR_CLASSES, channels: 3, height: SIDE, width: SIDE })
}
