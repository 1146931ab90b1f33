//! IDX files as used by MNIST: big-endian header, unsigned byte payload.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn header(bytes: &[u8], format: &'static str, words: usize) -> Result<Vec<u32>> {
    let need = 4 * words;
    if bytes.len() < need {
        return Err(Error::Truncated {
            format,
            needed: need as u64,
            available: bytes.len() as u64,
        });
    }
    Ok(bytes[..need]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn payload<'a>(bytes: &'a [u8], format: &'static str, offset: usize, len: Option<usize>) -> Result<&'a [u8]> {
    let len = len.ok_or_else(|| Error::format(format, "declared dimensions overflow"))?;
    let body = &bytes[offset..];
    if body.len() < len {
        return Err(Error::Truncated {
            format,
            needed: (offset + len) as u64,
            available: bytes.len() as u64,
        });
    }
    if body.len() > len {
        return Err(Error::format(
            format,
            format!("{} trailing bytes after payload", body.len() - len),
        ));
    }
    Ok(body)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    const FORMAT: &str = "idx images";
    let h = header(bytes, FORMAT, 4)?;
    if h[0] != IMAGES_MAGIC {
        return Err(Error::format(FORMAT, format!("bad magic {:#010x}", h[0])));
    }
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    if rows == 0 || cols == 0 {
        return Err(Error::format(FORMAT, "zero image extent"));
    }
    let len = count.checked_mul(rows).and_then(|v| v.checked_mul(cols));
    let body = payload(bytes, FORMAT, 16, len)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    const FORMAT: &str = "idx labels";
    let h = header(bytes, FORMAT, 2)?;
    if h[0] != LABELS_MAGIC {
        return Err(Error::format(FORMAT, format!("bad magic {:#010x}", h[0])));
    }
    Ok(payload(bytes, FORMAT, 8, Some(h[1] as usize))?.to_vec())
}

/// Loads an image/label file pair into a single-channel dataset with pixel
/// values scaled to `[0, 1]` (not yet standardized).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    dataset_from_idx(images, &labels)
}

pub(crate) fn dataset_from_idx(images: IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::format(
            "idx",
            format!("{} images but {} labels", images.count, labels.len()),
        ));
    }
    if images.count == 0 {
        return Err(Error::format("idx", "no samples"));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().map_or(10, |m| (m + 1).max(10));
    let data = images.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let tensor = Tensor::new(vec![images.count, 1, images.rows, images.cols], data)?;
    Dataset::new(tensor, labels, classes)
}
