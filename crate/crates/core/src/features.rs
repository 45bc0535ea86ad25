//! Per-patch embedding matrix and its binary file format.
//!
//! Layout of a feature file:
//!
//! | offset | size    | content                                   |
//! |--------|---------|-------------------------------------------|
//! | 0      | 5       | ASCII `FEAT1` (format tag, version digit) |
//! | 5      | 8       | row count `n`, little-endian u64          |
//! | 13     | 8       | column count `d`, little-endian u64       |
//! | 21     | 4·n·d   | row-major little-endian f32 values        |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 5] = b"FEAT1";
pub const FEATURE_HEADER_LEN: usize = 21;

/// n×d matrix of finite embeddings, one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Argument(format!("feature matrix must be non-empty, got {n}x{d}")));
        }
        if values.len() != n * d {
            return Err(Error::Dimension(format!(
                "{n}x{d} matrix needs {} values, got {}",
                n * d,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature at row {}, col {}", i / d, i % d)));
        }
        Ok(Self { n, d, values })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged feature rows".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| v as f32).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks(self.d)
    }

    /// Rows widened to f64, the precision clustering works in.
    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    /// Copy with every row scaled to unit Euclidean norm (zero rows stay zero).
    pub fn l2_normalized(&self) -> FeatureMatrix {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.d) {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
            }
        }
        FeatureMatrix {
            n: self.n,
            d: self.d,
            values,
        }
    }

    /// Stacks matrices of equal width.
    pub fn concat(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
        let first = parts.first().ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.d != first.d) {
            return Err(Error::Dimension("feature widths differ".into()));
        }
        let values = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
        FeatureMatrix::new(parts.iter().map(|p| p.n).sum(), first.d, values)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.d as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<FeatureMatrix> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::format(0, format!("read failed: {e}")))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<FeatureMatrix> {
        if bytes.len() < FEATURE_MAGIC.len() {
            return Err(Error::format(bytes.len() as u64, "truncated magic"));
        }
        if let Some(i) = (0..FEATURE_MAGIC.len()).find(|&i| bytes[i] != FEATURE_MAGIC[i]) {
            return Err(Error::format(i as u64, "bad magic, expected FEAT1"));
        }
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        }
        let n = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
        let d = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes"));
        if n == 0 || d == 0 {
            return Err(Error::format(5, format!("empty matrix {n}x{d}")));
        }
        let payload = n
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| Error::format(5, "dimensions overflow"))?;
        let available = (bytes.len() - FEATURE_HEADER_LEN) as u64;
        if available < payload {
            return Err(Error::format(
                FEATURE_HEADER_LEN as u64 + available - available % 4,
                format!("truncated payload: need {payload} bytes, have {available}"),
            ));
        }
        if available > payload {
            return Err(Error::format(
                FEATURE_HEADER_LEN as u64 + payload,
                "trailing bytes after payload",
            ));
        }
        let values = bytes[FEATURE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        FeatureMatrix::new(n as usize, d as usize, values).map_err(|e| match e {
            Error::Numeric(m) => Error::format(FEATURE_HEADER_LEN as u64, m),
            other => other,
        })
    }
}

/// Writes `x` to `path` through a temporary file and an atomic rename.
pub fn save_features(x: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN + x.values.len() * 4);
    x.write_to(&mut buf).expect("vec write");
    crate::fsutil::write_atomic(path, &buf)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_matrix_rejected() {
        assert!(FeatureMatrix::new(0, 4, vec![]).is_err());
        assert!(FeatureMatrix::from_rows(&[]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            FeatureMatrix::new(1, 2, vec![1.0, f32::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn file_size_for_full_width_features() {
        let x = FeatureMatrix::new(289, 768, vec![0.5; 289 * 768]).unwrap();
        let mut buf = Vec::new();
        x.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 289 * 768 * 4 + 21);
        assert_eq!(&buf[..5], b"FEAT1");
    }

    #[test]
    fn bad_magic_names_offset() {
        let err = FeatureMatrix::decode(b"FEAX1aaaaaaaaaaaaaaaa").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 3, .. }), "{err}");
    }

    #[test]
    fn truncation_names_offset() {
        let x = FeatureMatrix::new(2, 3, vec![1.0; 6]).unwrap();
        let mut buf = Vec::new();
        x.write_to(&mut buf).unwrap();
        let err = FeatureMatrix::decode(&buf[..buf.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 37, .. }), "{err}");
        let err = FeatureMatrix::decode(&buf[..10]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 10, .. }), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let x = FeatureMatrix::new(3, 2, vec![1.5, -0.0, 3.25e-8, 7.0, f32::MAX, f32::MIN_POSITIVE]).unwrap();
        save_features(&x, &path).unwrap();
        assert_eq!(load_features(&path).unwrap(), x);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(n in 1usize..12, d in 1usize..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..n * d).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
            let x = FeatureMatrix::new(n, d, values).unwrap();
            let mut buf = Vec::new();
            x.write_to(&mut buf).unwrap();
            let y = FeatureMatrix::decode(&buf).unwrap();
            let bits = |m: &FeatureMatrix| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&x), bits(&y));
        }
    }
}
