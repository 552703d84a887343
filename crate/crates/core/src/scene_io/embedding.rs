//! Fixed-length feature vectors produced by an offline extractor.
//!
//! File layout: `b"EMB1"`, `u32` dim (little-endian), then `dim` little-endian `f32`.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use thiserror::Error;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("bad magic {0:?}, expected \"EMB1\"")]
    BadMagic([u8; 4]),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("file holds {actual} bytes but dim {dim} implies {expected}")]
    LengthMismatch { dim: u32, expected: usize, actual: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::ZeroDim);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

pub fn decode_embedding(bytes: &[u8]) -> Result<EmbeddingVector, EmbeddingError> {
    if bytes.len() < HEADER_LEN {
        let mut magic = [0u8; 4];
        let n = bytes.len().min(4);
        magic[..n].copy_from_slice(&bytes[..n]);
        if magic[..n] != EMBEDDING_MAGIC[..n] {
            return Err(EmbeddingError::BadMagic(magic));
        }
        return Err(EmbeddingError::LengthMismatch { dim: 0, expected: HEADER_LEN, actual: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != EMBEDDING_MAGIC {
        return Err(EmbeddingError::BadMagic(magic));
    }
    let dim = LittleEndian::read_u32(&bytes[4..8]);
    if dim == 0 {
        return Err(EmbeddingError::ZeroDim);
    }
    let expected = HEADER_LEN + dim as usize * 4;
    if bytes.len() != expected {
        return Err(EmbeddingError::LengthMismatch { dim, expected, actual: bytes.len() });
    }
    let mut values = vec![0f32; dim as usize];
    LittleEndian::read_f32_into(&bytes[HEADER_LEN..], &mut values);
    EmbeddingVector::new(values)
}

pub fn encode_embedding(e: &EmbeddingVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + e.dim() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(e.dim() as u32).to_le_bytes());
    for v in e.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_embedding(path: &Path) -> Result<EmbeddingVector, EmbeddingError> {
    let bytes = fs::read(path).map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })?;
    decode_embedding(&bytes)
}

/// Alias of [`load_embedding`].
pub fn read_embedding(path: &Path) -> Result<EmbeddingVector, EmbeddingError> {
    load_embedding(path)
}

pub fn write_embedding(e: &EmbeddingVector, path: &Path) -> Result<(), EmbeddingError> {
    fs::write(path, encode_embedding(e))
        .map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_dim() {
        let bytes = encode_embedding(&EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap());
        assert_eq!(&bytes[..8], b"EMB1\x03\x00\x00\x00");
        assert_eq!(decode_embedding(&bytes).unwrap().values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        let good = encode_embedding(&EmbeddingVector::new(vec![0.5; 4]).unwrap());
        assert!(matches!(
            decode_embedding(&good[..good.len() - 2]),
            Err(EmbeddingError::LengthMismatch { dim: 4, .. })
        ));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embedding(&bad), Err(EmbeddingError::BadMagic(_))));
        assert!(matches!(decode_embedding(b"EMB1\0\0\0\0"), Err(EmbeddingError::ZeroDim)));
        let mut nan = good;
        nan[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_embedding(&nan), Err(EmbeddingError::NonFinite(0))));
        assert!(matches!(decode_embedding(b"EMB"), Err(EmbeddingError::LengthMismatch { .. })));
    }
}
