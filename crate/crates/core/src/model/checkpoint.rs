//! Binary model checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "MFDCKPT1"                 8 bytes
//! spec digest                32 bytes (SHA-256 of the model spec)
//! repeated until end of file:
//!   name length, name bytes (UTF-8)
//!   rank, extents[rank]
//!   values                   f64 little-endian, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFDCKPT1";
const FORMAT: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub entries: Vec<(String, Tensor<f64>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                format: FORMAT,
                needed: self.pos as u64 + n as u64,
                available: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.digest);
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(FORMAT, "bad magic"));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut entries = Vec::new();
        while r.remaining() > 0 {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(FORMAT, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            // each extent needs 4 bytes; reject absurd ranks before allocating
            if rank.saturating_mul(4) > r.remaining() {
                return Err(Error::Truncated {
                    format: FORMAT,
                    needed: (r.pos + rank.saturating_mul(4)) as u64,
                    available: bytes.len() as u64,
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u32()? as usize;
                if d == 0 {
                    return Err(Error::format(FORMAT, format!("`{name}` has a zero extent")));
                }
                shape.push(d);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(FORMAT, format!("`{name}` shape overflows")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| {
                Error::format(FORMAT, format!("`{name}` shape overflows"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { digest, entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            digest: [7; 32],
            entries: vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5)),
                ("scalar".into(), Tensor::scalar(-0.0)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.entries[1].1.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn huge_declared_shape_does_not_allocate() {
        let mut bytes = Vec::from(&CHECKPOINT_MAGIC[..]);
        bytes.extend_from_slice(&[0; 32]);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
