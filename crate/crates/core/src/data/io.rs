//! Binary matrix files and the JSON manifest entries that describe them.
//!
//! Layout: magic `3TMX`, then little-endian `u32` version (1), rows, cols, followed by
//! `rows × cols` little-endian binary64 values in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"3TMX";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// One tensor file listed in a manifest. `sha256` covers the value bytes after the header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

pub fn encode_matrix<T: Scalar>(m: &DenseMatrix<T>) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::ShapeMismatch("too many rows for file format".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::ShapeMismatch("too many cols for file format".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * m.as_slice().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for &v in m.as_slice() {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DenseMatrix<f64>> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile);
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile);
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4 bytes"));
    let version = word(1);
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let (rows, cols) = (word(2) as usize, word(3) as usize);
    let n = rows.checked_mul(cols).ok_or(Error::TruncatedFile)?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * 8 {
        return Err(Error::TruncatedFile);
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DenseMatrix::new(rows, cols, values)
}

pub fn write_matrix<T: Scalar>(path: impl AsRef<Path>, m: &DenseMatrix<T>) -> Result<()> {
    fs::write(path, encode_matrix(m)?)?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix<f64>> {
    decode_matrix(&fs::read(path)?)
}

/// Writes `m` to `dir/file` and returns its manifest entry.
pub fn write_entry<T: Scalar>(dir: &Path, name: &str, file: &str, m: &DenseMatrix<T>) -> Result<ManifestEntry> {
    let bytes = encode_matrix(m)?;
    fs::write(dir.join(file), &bytes)?;
    Ok(ManifestEntry {
        name: name.to_string(),
        path: file.to_string(),
        rows: m.rows(),
        cols: m.cols(),
        sha256: hex::encode(Sha256::digest(&bytes[HEADER_LEN..])),
    })
}

/// Reads the file behind `entry`, checking shape and checksum.
pub fn read_entry(dir: &Path, entry: &ManifestEntry) -> Result<DenseMatrix<f64>> {
    let bytes = fs::read(dir.join(&entry.path))?;
    let m = decode_matrix(&bytes)?;
    if m.shape() != (entry.rows, entry.cols) {
        return Err(Error::Malformed(format!(
            "{} is {}x{}, manifest says {}x{}",
            entry.path,
            m.rows(),
            m.cols(),
            entry.rows,
            entry.cols
        )));
    }
    let digest = hex::encode(Sha256::digest(&bytes[HEADER_LEN..]));
    if digest != entry.sha256 {
        return Err(Error::Malformed(format!("checksum mismatch for {}", entry.path)));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = DenseMatrix::<f64>::from_rows(&[[1.0, -0.5]]).unwrap();
        let b = encode_matrix(&m).unwrap();
        assert_eq!(&b[..4], b"3TMX");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.3tmx");
        let empty = DenseMatrix::<f64>::zeros(0, 0);
        write_matrix(&p, &empty).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), empty);

        let m = DenseMatrix::<f64>::from_rows(&[[f64::MIN_POSITIVE, -0.0], [1e300, 3.25]]).unwrap();
        write_matrix(&p, &m).unwrap();
        let back = read_matrix(&p).unwrap();
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_matrix(&p), Err(Error::BadMagic)));

        let mut bytes = encode_matrix(&m).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_matrix(&bytes), Err(Error::BadVersion(2))));

        let bytes = encode_matrix(&m).unwrap();
        assert!(matches!(
            decode_matrix(&bytes[..bytes.len() - 1]),
            Err(Error::TruncatedFile)
        ));
        assert!(matches!(decode_matrix(&bytes[..10]), Err(Error::TruncatedFile)));
        assert!(matches!(read_matrix(dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn manifest_entry_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = DenseMatrix::<f64>::from_rows(&[[1.0, 2.0]]).unwrap();
        let e = write_entry(dir.path(), "x", "x.3tmx", &m).unwrap();
        assert_eq!(read_entry(dir.path(), &e).unwrap(), m);
        let mut bad = e.clone();
        bad.sha256 = "00".into();
        assert!(read_entry(dir.path(), &bad).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(rows in 0usize..5, cols in 0usize..5, seed in any::<u64>()) {
            let mut rng = crate::numerics::RngStream::new(seed);
            let m = DenseMatrix::new(rows, cols, rng.normal_vec(rows * cols, 1e3)).unwrap();
            let back = decode_matrix(&encode_matrix(&m).unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
