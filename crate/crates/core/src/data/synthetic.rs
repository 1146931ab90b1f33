//! Class-conditional Gaussian blob images for download-free experiments.
//!
//! Each class owns a colored blob at a fixed position on a ring around the
//! image center. Samples jitter the blob by up to one pixel, scale its
//! amplitude and add white noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{standardize_splits, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Height and width of generated images.
pub const SYNTHETIC_SIDE: usize = 16;
const CHANNELS: usize = 3;
const NOISE_STD: f64 = 0.3;

struct Template {
    cx: f64,
    cy: f64,
    sigma: f64,
    color: [f64; CHANNELS],
}

fn templates(classes: usize, seed: u64) -> Vec<Template> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = (SYNTHETIC_SIDE as f64 - 1.0) / 2.0;
    (0..classes)
        .map(|k| {
            let angle = 2.0 * PI * (k as f64 + rng.random_range(-0.25..0.25)) / classes as f64;
            let radius = rng.random_range(2.5..4.5);
            let mut color = [0.0; CHANNELS];
            for c in &mut color {
                *c = StandardNormal.sample(&mut rng);
            }
            let norm = color.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            color.iter_mut().for_each(|c| *c /= norm);
            Template {
                cx: center + radius * angle.cos(),
                cy: center + radius * angle.sin(),
                sigma: rng.random_range(1.5..2.5),
                color,
            }
        })
        .collect()
}

/// One raw (unstandardized) split. Class templates depend only on `seed`;
/// samples depend on `(seed, split)`. Labels cycle through the classes so
/// every prefix is close to balanced.
pub fn synthetic_split(classes: usize, per_class: usize, seed: u64, split: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes, got {classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Config("synthetic data needs per_class >= 1".into()));
    }
    let templates = templates(classes, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split + 1);

    let n = classes * per_class;
    let side = SYNTHETIC_SIDE;
    let per = CHANNELS * side * side;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let t = &templates[k];
        let amp: f64 = rng.random_range(0.7..1.3);
        let dx = rng.random_range(-1i32..=1) as f64;
        let dy = rng.random_range(-1i32..=1) as f64;
        let two_var = 2.0 * t.sigma * t.sigma;
        for &col in &t.color {
            for y in 0..side {
                for x in 0..side {
                    let r2 = (x as f64 - t.cx - dx).powi(2) + (y as f64 - t.cy - dy).powi(2);
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push((amp * col * (-r2 / two_var).exp() + NOISE_STD * noise) as f32);
                }
            }
        }
        labels.push(k);
    }
    let images = Tensor::new(vec![n, CHANNELS, side, side], data)?;
    Dataset::new(images, labels, classes)
}

/// Training split (split 0), standardized with its own statistics.
pub fn synthetic_dataset(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    let mut train = synthetic_split(classes, per_class, seed, 0)?;
    let stats = train.channel_stats();
    train.standardize(&stats)?;
    Ok(train)
}

/// Training and test splits standardized with training statistics.
pub fn synthetic_splits(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    standardize_splits(
        synthetic_split(classes, train_per_class, seed, 0)?,
        synthetic_split(classes, test_per_class, seed, 1)?,
    )
}
