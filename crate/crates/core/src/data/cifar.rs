//! CIFAR-10 binary batches: records of one label byte followed by
//! 32x32 red, green and blue planes.

use std::path::PathBuf;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const FORMAT: &str = "cifar10";

/// Splits a batch file into labels and raw `[n, 3, 32, 32]` pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(Error::format(
            FORMAT,
            format!(
                "size {} is not a multiple of {CIFAR10_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR10_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(
                FORMAT,
                format!("record {i} has label byte {}", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Concatenates batch files into one dataset scaled to `[0, 1]`.
pub fn load_cifar10(batch_files: &[PathBuf]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in batch_files {
        let (l, p) = parse_cifar10(&std::fs::read(path)?)?;
        labels.extend(l);
        pixels.extend(p);
    }
    dataset_from_parts(labels, &pixels)
}

pub(crate) fn dataset_from_parts(labels: Vec<usize>, pixels: &[u8]) -> Result<Dataset> {
    if labels.is_empty() {
        return Err(Error::format(FORMAT, "no records"));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], data)?;
    Dataset::new(images, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i / 1024) as u8 * 100));
        let (labels, pixels) = parse_cifar10(&rec).unwrap();
        assert_eq!(labels, vec![7]);
        let ds = dataset_from_parts(labels, &pixels).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.image_shape(), (3, 32, 32));
        // planes are R, G, B in order
        assert_eq!(ds.sample(0)[0], 0.0);
        assert_eq!(ds.sample(0)[1024], 100.0 / 255.0);
        assert_eq!(ds.sample(0)[2048], 200.0 / 255.0);
    }

    #[test]
    fn size_and_label_errors() {
        assert!(parse_cifar10(&vec![0u8; 3072]).is_err());
        let mut rec = vec![0u8; 3073];
        rec[0] = 10;
        assert!(parse_cifar10(&rec).is_err());
        assert!(dataset_from_parts(vec![], &[]).is_err());
    }
}
