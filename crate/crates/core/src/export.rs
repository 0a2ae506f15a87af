//! Minimal binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                         |
//! |--------------|---------------------------------|
//! | 4            | magic `FIMG`                    |
//! | 2            | format version (`1`)            |
//! | 1            | dtype tag (`1` = f32)           |
//! | 1            | rank                            |
//! | 8 * rank     | shape, u64 per dimension        |
//! | 4 * prod     | row-major f32 payload           |
//! | 4            | CRC-32 (IEEE) of the payload    |

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FIMG";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("value at index {index} is not finite")]
    NonFiniteValue { index: usize },
    #[error("shape {shape:?} holds {expected} values, got {got}")]
    ShapeMismatch { shape: Vec<u64>, expected: u64, got: u64 },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("file is truncated")]
    TruncatedFile,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("payload checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    CrcMismatch { stored: u32, computed: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io { path: path.to_path_buf(), source }
}

fn element_count(shape: &[u64]) -> Option<u64> {
    shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

fn header_bytes(shape: &[u64]) -> Vec<u8> {
    let mut h = Vec::with_capacity(8 + 8 * shape.len());
    h.extend_from_slice(&MAGIC);
    h.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    h.push(DTYPE_F32);
    h.push(shape.len() as u8);
    for d in shape {
        h.extend_from_slice(&d.to_le_bytes());
    }
    h
}

/// Incremental writer for tensors too large to hold in memory at once.
pub struct TensorWriter {
    path: PathBuf,
    out: BufWriter<File>,
    shape: Vec<u64>,
    expected: u64,
    written: u64,
    crc: crc32fast::Hasher,
}

impl TensorWriter {
    pub fn create(path: impl AsRef<Path>, shape: &[u64]) -> Result<Self, TensorError> {
        let path = path.as_ref().to_path_buf();
        let expected = element_count(shape).ok_or_else(|| TensorError::ShapeMismatch {
            shape: shape.to_vec(),
            expected: u64::MAX,
            got: 0,
        })?;
        if shape.len() > u8::MAX as usize {
            return Err(TensorError::ShapeMismatch { shape: shape.to_vec(), expected, got: 0 });
        }
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header_bytes(shape)).map_err(io_err(&path))?;
        Ok(Self { path, out, shape: shape.to_vec(), expected, written: 0, crc: crc32fast::Hasher::new() })
    }

    pub fn write_values(&mut self, values: &[f32]) -> Result<(), TensorError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteValue { index: self.written as usize + i });
        }
        if self.written + values.len() as u64 > self.expected {
            return Err(TensorError::ShapeMismatch {
                shape: self.shape.clone(),
                expected: self.expected,
                got: self.written + values.len() as u64,
            });
        }
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.crc.update(&buf);
        self.out.write_all(&buf).map_err(io_err(&self.path))?;
        self.written += values.len() as u64;
        Ok(())
    }

    /// Writes the checksum and syncs the file to disk.
    pub fn finish(mut self) -> Result<(), TensorError> {
        if self.written != self.expected {
            return Err(TensorError::ShapeMismatch { shape: self.shape, expected: self.expected, got: self.written });
        }
        let crc = self.crc.clone().finalize();
        self.out.write_all(&crc.to_le_bytes()).map_err(io_err(&self.path))?;
        let file = self.out.into_inner().map_err(|e| io_err(&self.path)(e.into_error()))?;
        file.sync_all().map_err(io_err(&self.path))
    }
}

pub fn write_tensor(path: impl AsRef<Path>, shape: &[u64], values: &[f32]) -> Result<(), TensorError> {
    let expected = element_count(shape).unwrap_or(u64::MAX);
    if expected != values.len() as u64 {
        return Err(TensorError::ShapeMismatch { shape: shape.to_vec(), expected, got: values.len() as u64 });
    }
    let mut w = TensorWriter::create(path, shape)?;
    w.write_values(values)?;
    w.finish()
}

/// Decodes a whole container held in memory.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<u64>, Vec<f32>), TensorError> {
    let take = |range: std::ops::Range<usize>| bytes.get(range).ok_or(TensorError::TruncatedFile);
    if take(0..4)? != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let version = u16::from_le_bytes(take(4..6)?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(TensorError::UnsupportedVersion(version));
    }
    let dtype = take(6..7)?[0];
    if dtype != DTYPE_F32 {
        return Err(TensorError::UnsupportedDtype(dtype));
    }
    let rank = take(7..8)?[0] as usize;
    let shape: Vec<u64> = (0..rank)
        .map(|i| take(8 + 8 * i..16 + 8 * i).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes"))))
        .collect::<Result<_, _>>()?;
    let header_len = 8 + 8 * rank;
    let count = element_count(&shape).ok_or(TensorError::TruncatedFile)?;
    let payload_len = count.checked_mul(4).ok_or(TensorError::TruncatedFile)?;
    let total = (header_len as u64)
        .checked_add(payload_len)
        .and_then(|t| t.checked_add(4))
        .ok_or(TensorError::TruncatedFile)?;
    if (bytes.len() as u64) < total {
        return Err(TensorError::TruncatedFile);
    }
    if (bytes.len() as u64) > total {
        return Err(TensorError::TrailingBytes((bytes.len() as u64 - total) as usize));
    }
    let payload = &bytes[header_len..header_len + payload_len as usize];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(TensorError::CrcMismatch { stored, computed });
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((shape, values))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Vec<u64>, Vec<f32>), TensorError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fimg");
        write_tensor(&path, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 + 16 + 16 + 4);
        let (shape, values) = read_tensor(&path).unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fimg");
        write_tensor(&path, &[3], &[1.0, 2.0, 3.0]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[18] ^= 0x01;
        assert!(matches!(decode_tensor(&bytes), Err(TensorError::CrcMismatch { .. })));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fimg");
        write_tensor(&path, &[2], &[1.0, 2.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(TensorError::BadMagic)));
        assert!(matches!(decode_tensor(&bytes[..bytes.len() - 1]), Err(TensorError::TruncatedFile)));
        assert!(matches!(decode_tensor(&bytes[..3]), Err(TensorError::TruncatedFile)));
    }

    #[test]
    fn rejects_non_finite_and_wrong_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fimg");
        assert!(matches!(write_tensor(&path, &[2], &[1.0, f32::NAN]), Err(TensorError::NonFiniteValue { index: 1 })));
        assert!(matches!(write_tensor(&path, &[3], &[1.0]), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn streaming_writer_matches_one_shot() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.fimg");
        let b = dir.path().join("b.fimg");
        let values: Vec<f32> = (0..12).map(|i| i as f32 * 0.5).collect();
        write_tensor(&a, &[3, 4], &values).unwrap();
        let mut w = TensorWriter::create(&b, &[3, 4]).unwrap();
        for chunk in values.chunks(5) {
            w.write_values(chunk).unwrap();
        }
        w.finish().unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
