//! Binary dumps of stage activations.
//!
//! ```text
//! "MFDFMAP1"                      8 bytes
//! stage, b, d, h, w               u32 little-endian each
//! b*d*h*w values                  f32 little-endian, row-major
//! ```

use decorr_core::Tensor;

pub const FEATURE_DUMP_MAGIC: &[u8; 8] = b"MFDFMAP1";
const HEADER_BYTES: usize = 8 + 5 * 4;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DumpError {
    #[error("feature dump is {0} bytes, shorter than its header")]
    Truncated(usize),
    #[error("feature dump has a bad magic number")]
    BadMagic,
    #[error("feature dump header has a zero dimension")]
    ZeroDimension,
    #[error("feature dump declares {declared} values but holds {actual} bytes of payload")]
    LengthMismatch { declared: u64, actual: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub stage: u32,
    /// `[b, d, h, w]` activations.
    pub values: Tensor<f32>,
}

impl FeatureDump {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.values.numel());
        out.extend_from_slice(FEATURE_DUMP_MAGIC);
        out.extend_from_slice(&self.stage.to_le_bytes());
        for &d in self.values.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.values.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DumpError> {
        if bytes.len() < HEADER_BYTES {
            return Err(DumpError::Truncated(bytes.len()));
        }
        if &bytes[..8] != FEATURE_DUMP_MAGIC {
            return Err(DumpError::BadMagic);
        }
        let word = |i: usize| {
            let at = 8 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
        };
        let stage = word(0);
        let dims = [word(1), word(2), word(3), word(4)];
        if dims.contains(&0) {
            return Err(DumpError::ZeroDimension);
        }
        let payload = &bytes[HEADER_BYTES..];
        let declared = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if declared.and_then(|n| n.checked_mul(4)) != Some(payload.len() as u64) {
            return Err(DumpError::LengthMismatch {
                declared: declared.unwrap_or(u64::MAX),
                actual: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let shape = dims.iter().map(|&d| d as usize).collect();
        let values = Tensor::new(shape, data).expect("length checked against header");
        Ok(FeatureDump { stage, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let dump = FeatureDump {
            stage: 2,
            values: Tensor::from_fn(&[1, 2, 1, 1], |i| i as f32 + 0.5),
        };
        let bytes = dump.to_bytes();
        assert_eq!(bytes.len(), 28 + 8);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[2, 0, 0, 0]);
        assert_eq!(&bytes[28..32], &0.5f32.to_le_bytes());
        assert_eq!(FeatureDump::from_bytes(&bytes).unwrap(), dump);
    }

    #[test]
    fn malformed() {
        let bytes = FeatureDump {
            stage: 0,
            values: Tensor::zeros(&[2, 2, 2, 2]),
        }
        .to_bytes();
        assert_eq!(FeatureDump::from_bytes(&bytes[..10]), Err(DumpError::Truncated(10)));
        assert!(matches!(
            FeatureDump::from_bytes(&bytes[..bytes.len() - 4]),
            Err(DumpError::LengthMismatch { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'N';
        assert_eq!(FeatureDump::from_bytes(&bad), Err(DumpError::BadMagic));
        let mut zero = bytes;
        zero[12..16].copy_from_slice(&[0; 4]);
        assert_eq!(FeatureDump::from_bytes(&zero), Err(DumpError::ZeroDimension));
    }

    #[test]
    fn huge_header_does_not_overflow() {
        let mut bytes = FEATURE_DUMP_MAGIC.to_vec();
        for _ in 0..5 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            FeatureDump::from_bytes(&bytes),
            Err(DumpError::LengthMismatch { .. })
        ));
    }
}
