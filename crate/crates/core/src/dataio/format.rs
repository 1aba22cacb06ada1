//! `PPFM` feature-map container.
//!
//! ```text
//! magic   "PPFM"
//! version u32            (= 1)
//! N H W D u32 × 4
//! N × { label u32, H·W·D × f32 }   row-major, location-major then depth
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{DataError, FeatureMapDataset, Sample};
use crate::poolcore::FeatureMap;

pub const MAGIC: &[u8; 4] = b"PPFM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic {found:?} at byte {offset}")]
    BadMagic { offset: u64, found: Vec<u8> },
    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },
    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: usize },
    #[error("{extra} trailing bytes at byte {offset}")]
    TrailingBytes { offset: u64, extra: usize },
    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: u64 },
    #[error("invalid header at byte {offset}: {reason}")]
    InvalidHeader { offset: u64, reason: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(FormatError::Truncated {
                offset: self.bytes.len() as u64,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn encode_dataset(ds: &FeatureMapDataset) -> Vec<u8> {
    let (h, w, d) = ds.dims();
    let per = h * w * d;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (4 + 4 * per));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [ds.len(), h, w, d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in ds.samples() {
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        for &v in s.map.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<FeatureMapDataset, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            offset: 0,
            found: magic.to_vec(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion { offset: 4, version });
    }
    let n = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let d = r.u32()? as usize;
    if n > 0 && (h == 0 || w == 0 || d == 0) {
        return Err(FormatError::InvalidHeader {
            offset: 12,
            reason: format!("zero extent in {h}x{w}x{d} with {n} samples"),
        });
    }
    let per = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| FormatError::InvalidHeader {
            offset: 12,
            reason: "map size overflows".into(),
        })?;

    let mut samples = Vec::with_capacity(n.min(bytes.len() / (4 + 4 * per.max(1))));
    for _ in 0..n {
        let label = r.u32()? as usize;
        let start = r.pos;
        let raw = r.take(4 * per)?;
        let mut data = Vec::with_capacity(per);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(FormatError::NonFinite {
                    offset: (start + 4 * i) as u64,
                });
            }
            data.push(f64::from(v));
        }
        let map = FeatureMap::new(h, w, d, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
        samples.push(Sample { label, map });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            offset: r.pos as u64,
            extra: bytes.len() - r.pos,
        });
    }
    FeatureMapDataset::with_dims(h, w, d, samples).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn write_dataset(ds: &FeatureMapDataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_dataset(ds)).map_err(|e| DataError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<FeatureMapDataset, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    Ok(decode_dataset(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FeatureMapDataset {
        let maps = (0..3)
            .map(|i| Sample {
                label: i % 2,
                map: FeatureMap::new(1, 2, 2, vec![0.5 * i as f64, -1.25, 3.0, 1e-3]).unwrap(),
            })
            .collect();
        FeatureMapDataset::new(maps).unwrap()
    }

    #[test]
    fn empty_file_is_valid() {
        let ds = FeatureMapDataset::with_dims(0, 0, 0, Vec::new()).unwrap();
        let bytes = encode_dataset(&ds);
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = decode_dataset(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.num_classes(), 0);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_dataset(&tiny());
        assert_eq!(&bytes[..4], b"PPFM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), HEADER_LEN + 3 * (4 + 4 * 4));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_dataset(&tiny());
        let cut = &bytes[..bytes.len() - 3];
        match decode_dataset(cut) {
            Err(FormatError::Truncated { offset, needed }) => {
                assert_eq!(offset as usize, cut.len());
                assert_eq!(needed, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode_dataset(&bytes[..10]), Err(FormatError::Truncated { offset: 10, .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_dataset(&tiny());
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(FormatError::BadMagic { offset: 0, .. })));
        let mut bytes = encode_dataset(&tiny());
        bytes[4] = 9;
        assert!(matches!(
            decode_dataset(&bytes),
            Err(FormatError::UnsupportedVersion { offset: 4, version: 9 })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_dataset(&tiny());
        bytes.push(0);
        assert!(matches!(decode_dataset(&bytes), Err(FormatError::TrailingBytes { extra: 1, .. })));
    }

    #[test]
    fn nan_rejected_with_offset() {
        let mut bytes = encode_dataset(&tiny());
        let at = HEADER_LEN + 4 + 8;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(decode_dataset(&bytes), Err(FormatError::NonFinite { offset: at as u64 }));
    }
}
