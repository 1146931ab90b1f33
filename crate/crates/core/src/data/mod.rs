//! Datasets, loaders and batching.

mod batch;
mod cifar;
mod idx;
mod synthetic;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batch::{augment_sample, AugmentationPolicy, Batch, Batches, PadMode};
pub use cifar::{load_cifar10, parse_cifar10, CIFAR10_RECORD_BYTES};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IdxImages};
pub use synthetic::{synthetic_dataset, synthetic_split, synthetic_splits, SYNTHETIC_SIDE};

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "DECORR_DATA_DIR";

/// Per-channel standardization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Labelled images `[n, c, h, w]` stored in 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_count: usize,
    stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "dataset images must be [n, c, h, w], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::format(
                "dataset",
                format!("{} images but {} labels", shape[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: class_count,
            });
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Statistics the images were standardized with, if any.
    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let (c, h, w) = self.image_shape();
        let n = c * h * w;
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        Dataset {
            images: Tensor::from_slice(&[n, c, h, w], &self.images.data()[..n * per])
                .expect("prefix of a valid dataset"),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
            stats: self.stats.clone(),
        }
    }

    /// Mean and population standard deviation of each channel.
    pub fn channel_stats(&self) -> ChannelStats {
        let (c, h, w) = self.image_shape();
        let plane = h * w;
        let count = (self.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..self.len() {
            for (ch, plane_vals) in self.sample(i).chunks(plane).enumerate() {
                mean[ch] += plane_vals.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..self.len() {
            for (ch, plane_vals) in self.sample(i).chunks(plane).enumerate() {
                sq[ch] += plane_vals
                    .iter()
                    .map(|&v| (v as f64 - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|&s| {
                let sd = (s / count).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    /// Applies `(x - mean) / std` per channel and records `stats`.
    pub fn standardize(&mut self, stats: &ChannelStats) -> Result<()> {
        let (c, h, w) = self.image_shape();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::ShapeMismatch {
                op: "standardize",
                left: vec![c],
                right: vec![stats.mean.len()],
            });
        }
        let plane = h * w;
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = ((*v as f64 - stats.mean[ch]) / stats.std[ch]) as f32;
        }
        self.stats = Some(stats.clone());
        Ok(())
    }
}

/// Standardizes both splits with statistics of the training split.
pub fn standardize_splits(mut train: Dataset, mut test: Dataset) -> Result<(Dataset, Dataset)> {
    if train.image_shape() != test.image_shape() {
        return Err(Error::format(
            "dataset",
            format!(
                "train images {:?} and test images {:?} differ in shape",
                train.image_shape(),
                test.image_shape()
            ),
        ));
    }
    let stats = train.channel_stats();
    train.standardize(&stats)?;
    test.standardize(&stats)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let images = Tensor::from_fn(&[4, 2, 2, 2], |i| (i * 7 % 5) as f32 + (i / 8) as f32);
        Dataset::new(images, vec![0, 1, 2, 1], 3).unwrap()
    }

    #[test]
    fn standardization_zeroes_mean_and_unit_variance() {
        let mut d = toy();
        let stats = d.channel_stats();
        d.standardize(&stats).unwrap();
        let after = d.channel_stats();
        for ch in 0..2 {
            assert!(after.mean[ch].abs() < 1e-6);
            assert!((after.std[ch].powi(2) - 1.0).abs() < 1e-4);
        }
        assert_eq!(d.stats(), Some(&stats));
    }

    #[test]
    fn labels_validated() {
        let images = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(Dataset::new(images.clone(), vec![0, 3], 3).is_err());
        assert!(Dataset::new(images, vec![0], 3).is_err());
    }

    #[test]
    fn take_prefix() {
        let d = toy().take(2);
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[0, 1]);
    }
}
