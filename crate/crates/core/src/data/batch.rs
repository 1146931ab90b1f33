use std::marker::PhantomData;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the border added before cropping is filled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Reflect,
    Zero,
}

/// Pad, random-crop and horizontal-flip augmentation for training batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub enabled: bool,
    pub pad_pixels: usize,
    /// Output `(height, width)`.
    pub crop_to: (usize, usize),
    pub hflip_probability: f64,
    #[serde(default)]
    pub pad_mode: PadMode,
}

impl AugmentationPolicy {
    /// Leaves `h x w` images untouched.
    pub fn disabled(h: usize, w: usize) -> Self {
        AugmentationPolicy {
            enabled: false,
            pad_pixels: 0,
            crop_to: (h, w),
            hflip_probability: 0.0,
            pad_mode: PadMode::Reflect,
        }
    }

    /// Pad by 4, crop back to `h x w`, flip with probability 0.5.
    pub fn standard(h: usize, w: usize) -> Self {
        AugmentationPolicy {
            enabled: true,
            pad_pixels: 4,
            crop_to: (h, w),
            hflip_probability: 0.5,
            pad_mode: PadMode::Reflect,
        }
    }

    /// Spatial extent of the images this policy produces from `h x w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        if self.enabled {
            self.crop_to
        } else {
            (h, w)
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::Config(format!(
                "hflip_probability {} is outside [0, 1]",
                self.hflip_probability
            )));
        }
        let (ch, cw) = self.crop_to;
        let p = self.pad_pixels;
        if ch == 0 || cw == 0 || ch > h + 2 * p || cw > w + 2 * p {
            return Err(Error::Config(format!(
                "crop {ch}x{cw} does not fit in {h}x{w} padded by {p}"
            )));
        }
        if self.pad_mode == PadMode::Reflect && (p >= h || p >= w) {
            return Err(Error::Config(format!(
                "reflect padding of {p} needs images larger than {h}x{w}"
            )));
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Augments one `[c, h, w]` image. Always draws crop offsets and the flip
/// decision, so the random stream advances identically for every sample.
pub fn augment_sample<R: Rng>(
    src: &[f32],
    (c, h, w): (usize, usize, usize),
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Vec<f32> {
    if !policy.enabled {
        return src.to_vec();
    }
    let p = policy.pad_pixels;
    let (ch, cw) = policy.crop_to;
    let oy = rng.random_range(0..=h + 2 * p - ch) as isize - p as isize;
    let ox = rng.random_range(0..=w + 2 * p - cw) as isize - p as isize;
    let flip = rng.random_bool(policy.hflip_probability);
    let mut out = Vec::with_capacity(c * ch * cw);
    for plane in src.chunks_exact(h * w).take(c) {
        for y in 0..ch {
            let sy = oy + y as isize;
            for x in 0..cw {
                let xx = if flip { cw - 1 - x } else { x };
                let sx = ox + xx as isize;
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                out.push(if inside {
                    plane[sy as usize * w + sx as usize]
                } else {
                    match policy.pad_mode {
                        PadMode::Zero => 0.0,
                        PadMode::Reflect => plane[reflect(sy, h) * w + reflect(sx, w)],
                    }
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

/// Iterator over mini-batches of a dataset.
///
/// Training iteration shuffles with a generator keyed by `(seed, epoch)`,
/// augments each sample and drops the final short batch. Evaluation
/// iteration walks the dataset in order and keeps the short batch.
pub struct Batches<'a, T> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    end: usize,
    aug: Option<(AugmentationPolicy, ChaCha8Rng)>,
    _scalar: PhantomData<T>,
}

impl<'a, T: Scalar> Batches<'a, T> {
    pub fn train(
        dataset: &'a Dataset,
        batch_size: usize,
        shuffle_seed: u64,
        epoch: usize,
        policy: &AugmentationPolicy,
    ) -> Result<Self> {
        check_batch_size(dataset, batch_size)?;
        let (_, h, w) = dataset.image_shape();
        policy.validate(h, w)?;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(shuffle_seed);
        shuffle.set_stream(2 * epoch as u64);
        order.shuffle(&mut shuffle);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        aug_rng.set_stream(2 * epoch as u64 + 1);
        let end = dataset.len() / batch_size * batch_size;
        Ok(Batches {
            dataset,
            order,
            batch_size,
            pos: 0,
            end,
            aug: policy.enabled.then(|| (policy.clone(), aug_rng)),
            _scalar: PhantomData,
        })
    }

    pub fn eval(dataset: &'a Dataset, batch_size: usize) -> Result<Self> {
        check_batch_size(dataset, batch_size)?;
        Ok(Batches {
            dataset,
            order: (0..dataset.len()).collect(),
            batch_size,
            pos: 0,
            end: dataset.len(),
            aug: None,
            _scalar: PhantomData,
        })
    }

    /// Number of batches this iterator yields in total.
    pub fn batch_count(&self) -> usize {
        self.end.div_ceil(self.batch_size)
    }
}

fn check_batch_size(dataset: &Dataset, batch_size: usize) -> Result<()> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be between 1 and the dataset size {}",
            dataset.len()
        )));
    }
    Ok(())
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.end {
            return None;
        }
        let stop = (self.pos + self.batch_size).min(self.end);
        let indices = self.order[self.pos..stop].to_vec();
        self.pos = stop;

        let shape = self.dataset.image_shape();
        let (c, mut h, mut w) = shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        match &mut self.aug {
            None => {
                for &i in &indices {
                    data.extend(self.dataset.sample(i).iter().map(|&v| T::of(v as f64)));
                }
            }
            Some((policy, rng)) => {
                for &i in &indices {
                    let img = augment_sample(self.dataset.sample(i), shape, policy, rng);
                    data.extend(img.into_iter().map(|v| T::of(v as f64)));
                }
                (h, w) = policy.crop_to;
            }
        }
        let labels = indices.iter().map(|&i| self.dataset.labels()[i]).collect();
        let images = Tensor::new(vec![indices.len(), c, h, w], data)
            .expect("batch shape matches gathered data");
        Some(Batch {
            images,
            labels,
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.end - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl<T: Scalar> ExactSizeIterator for Batches<'_, T> {}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize) -> Dataset {
        let images = Tensor::from_fn(&[n, 2, 5, 6], |i| i as f32);
        Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3).unwrap()
    }

    #[test]
    fn disabled_policy_yields_exact_slices() {
        let d = dataset(7);
        let policy = AugmentationPolicy::disabled(5, 6);
        let batches: Vec<Batch<f64>> = Batches::train(&d, 3, 11, 0, &policy).unwrap().collect();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            for (k, &i) in b.indices.iter().enumerate() {
                let got = &b.images.data()[k * 60..(k + 1) * 60];
                let want: Vec<f64> = d.sample(i).iter().map(|&v| v as f64).collect();
                assert_eq!(got, &want[..]);
                assert_eq!(b.labels[k], d.labels()[i]);
            }
        }
    }

    #[test]
    fn train_covers_retained_samples_once_and_eval_keeps_remainder() {
        let d = dataset(10);
        let policy = AugmentationPolicy::standard(5, 6);
        let mut seen: Vec<usize> = Batches::<f32>::train(&d, 4, 3, 2, &policy)
            .unwrap()
            .flat_map(|b| b.indices)
            .collect();
        assert_eq!(seen.len(), 8);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);

        let sizes: Vec<usize> = Batches::<f32>::eval(&d, 4)
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn epochs_permute_differently_and_reproducibly() {
        let d = dataset(12);
        let p = AugmentationPolicy::standard(5, 6);
        let run = |epoch| -> Vec<Batch<f32>> { Batches::train(&d, 4, 5, epoch, &p).unwrap().collect() };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0)[0].indices, run(1)[0].indices);
    }

    #[test]
    fn batch_size_larger_than_dataset_is_an_error() {
        let d = dataset(3);
        assert!(Batches::<f32>::eval(&d, 4).is_err());
        assert!(Batches::<f32>::train(&d, 0, 0, 0, &AugmentationPolicy::disabled(5, 6)).is_err());
    }

    #[test]
    fn constant_image_survives_pad_and_crop() {
        let img = vec![0.25f32; 3 * 8 * 8];
        let policy = AugmentationPolicy::standard(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(augment_sample(&img, (3, 8, 8), &policy, &mut rng), img);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let img: Vec<f32> = (0..2 * 4 * 5).map(|i| i as f32).collect();
        let policy = AugmentationPolicy {
            enabled: true,
            pad_pixels: 0,
            crop_to: (4, 5),
            hflip_probability: 1.0,
            pad_mode: PadMode::Reflect,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let once = augment_sample(&img, (2, 4, 5), &policy, &mut rng);
        assert_ne!(once, img);
        assert_eq!(once[0], 4.0);
        let twice = augment_sample(&once, (2, 4, 5), &policy, &mut rng);
        assert_eq!(twice, img);
    }

    #[test]
    fn reflect_and_zero_padding() {
        // 1x3x3 image, pad 1, crop 5x5 covers the whole padded frame
        let img: Vec<f32> = (1..=9).map(|i| i as f32).collect();
        let mut policy = AugmentationPolicy {
            enabled: true,
            pad_pixels: 1,
            crop_to: (5, 5),
            hflip_probability: 0.0,
            pad_mode: PadMode::Reflect,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_sample(&img, (1, 3, 3), &policy, &mut rng);
        assert_eq!(&out[..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
        assert_eq!(&out[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
        policy.pad_mode = PadMode::Zero;
        let out = augment_sample(&img, (1, 3, 3), &policy, &mut rng);
        assert_eq!(&out[..5], &[0.0; 5]);
        assert_eq!(&out[5..10], &[0.0, 1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentationPolicy::standard(8, 8);
        assert!(p.validate(8, 8).is_ok());
        p.crop_to = (17, 8);
        assert!(p.validate(8, 8).is_err());
        let p = AugmentationPolicy::standard(4, 4);
        assert!(p.validate(4, 4).is_err(), "reflect pad must be smaller than the image");
    }
}
