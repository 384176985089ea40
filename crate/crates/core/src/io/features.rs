//! `VSF1` feature files: a 12-byte header followed by `f32` rows.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VSF1"
//! 4       4     num_rows  (u32, little endian)
//! 8       4     dim       (u32, little endian)
//! 12      4*n   payload, row-major f32 little endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"VSF1";
pub const FEATURE_HEADER_LEN: usize = 12;

/// Serializes `features` as a feature file. Values are narrowed to `f32`.
pub fn encode_features(features: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(features.rows())
        .map_err(|_| Error::InvalidArgument("too many rows for a feature file".into()))?;
    let dim = u32::try_from(features.cols())
        .map_err(|_| Error::InvalidArgument("feature width too large".into()))?;
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for (i, &v) in features.data().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite value at row {}, column {}",
                i / features.cols(),
                i % features.cols()
            )));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

/// Parses feature-file bytes; `origin` names the source in errors.
pub fn decode_features(bytes: &[u8], origin: &Path) -> Result<Matrix> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::format(
            origin,
            format!(
                "file is {} bytes, shorter than the 12-byte header",
                bytes.len()
            ),
        ));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(
            origin,
            format!("bad magic {:?}, expected \"VSF1\"", &bytes[..4]),
        ));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = FEATURE_HEADER_LEN as u64 + 4 * rows as u64 * dim as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::format(
            origin,
            format!(
                "size mismatch: header declares {rows}x{dim} ({expected} bytes), file has {} bytes",
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(rows * dim);
    for (i, chunk) in bytes[FEATURE_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                origin,
                format!("non-finite value at row {}, column {}", i / dim, i % dim),
            ));
        }
        data.push(f64::from(v));
    }
    Matrix::from_vec(rows, dim, data)
}

pub fn write_features(path: impl AsRef<Path>, features: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(features)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = Matrix::from_rows(&[[1.0, -2.5]]);
        let bytes = encode_features(&m).unwrap();
        assert_eq!(bytes.len(), 12 + 8);
        assert_eq!(&bytes[..4], b"VSF1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("mem");
        let bytes = encode_features(&Matrix::filled(2, 3, 0.5)).unwrap();

        let err = decode_features(&bytes[..bytes.len() - 4], p).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("36 bytes") && msg.contains("32 bytes"),
            "{msg}"
        );

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_features(&bad, p)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        let mut nan = bytes.clone();
        nan[12 + 4 * 4..12 + 4 * 5].copy_from_slice(&f32::NAN.to_le_bytes());
        let msg = decode_features(&nan, p).unwrap_err().to_string();
        assert!(msg.contains("row 1, column 1"), "{msg}");

        assert!(decode_features(&bytes[..5], p).is_err());
        assert!(encode_features(&Matrix::filled(1, 1, f64::INFINITY)).is_err());
    }
}
