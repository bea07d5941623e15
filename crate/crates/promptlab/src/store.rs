//! PTES binary container and the typed embedding store on top of it.
//!
//! Layout:
//!
//! ```text
//! bytes 0..4    magic, ASCII "PTES"
//! bytes 4..8    version, u32 little-endian (currently 1)
//! bytes 8..12   header length H, u32 little-endian
//! bytes 12..12+H UTF-8 JSON header
//! 12+H..        payload: row-major IEEE-754 binary32 little-endian
//!               matrices, at the offsets the header states relative to
//!               the payload start
//! ```
//!
//! The JSON header carries `dim`, `classes`, a `matrices` table of
//! `{name, rows, cols, offset}`, and optional `labels` / `meta`. Values are
//! widened binary32 → binary64 on load and narrowed on save, so a
//! save→load round trip reproduces matrices bit-exactly at 32-bit
//! precision, and save→load→save reproduces the file bytes.
//!
//! [`Container`] reads and writes arbitrary named matrices (checkpoints
//! use this directly). [`EmbeddingStore`] adds the embedding-file
//! contract: every matrix has `dim` columns and labels lie on the simplex.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PTES";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dim: usize,
    classes: Vec<String>,
    matrices: Vec<MatrixEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

/// Raw PTES container: named f32 matrices plus a JSON header.
/// Matrix order is insertion order and determines payload packing.
#[derive(Debug, Clone)]
pub struct Container {
    pub dim: usize,
    pub classes: Vec<String>,
    matrices: Vec<(String, Tensor)>,
    pub labels: Option<Vec<Vec<f64>>>,
    pub meta: Option<serde_json::Value>,
}

impl Container {
    pub fn new(dim: usize, classes: Vec<String>) -> Self {
        Container { dim, classes, matrices: Vec::new(), labels: None, meta: None }
    }

    /// Adds a named rank-2 matrix. Names must be unique.
    pub fn insert_matrix(&mut self, name: &str, t: Tensor) -> Result<()> {
        if t.rank() != 2 {
            return Err(Error::format(format!(
                "container matrices must be rank 2, '{name}' has shape {:?}",
                t.shape()
            )));
        }
        if self.matrices.iter().any(|(n, _)| n == name) {
            return Err(Error::format(format!("duplicate matrix name '{name}'")));
        }
        self.matrices.push((name.to_string(), t));
        Ok(())
    }

    pub fn matrix(&self, name: &str) -> Option<&Tensor> {
        self.matrices.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn matrix_names(&self) -> impl Iterator<Item = &str> {
        self.matrices.iter().map(|(n, _)| n.as_str())
    }

    pub fn has_matrix(&self, name: &str) -> bool {
        self.matrix(name).is_some()
    }

    /// Serializes to the container byte layout. Matrices pack
    /// back-to-back in insertion order; values narrow to binary32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.matrices.len());
        let mut offset = 0usize;
        for (name, t) in &self.matrices {
            entries.push(MatrixEntry {
                name: name.clone(),
                rows: t.shape()[0],
                cols: t.shape()[1],
                offset,
            });
            offset += t.numel() * 4;
        }
        let header = Header {
            dim: self.dim,
            classes: self.classes.clone(),
            matrices: entries,
            labels: self.labels.clone(),
            meta: self.meta.clone(),
        };
        let header_json = serde_json::to_string(&header)
            .map_err(|e| Error::format(format!("header serialization failed: {e}")))?;
        let header_bytes = header_json.as_bytes();

        let mut out = Vec::with_capacity(12 + header_bytes.len() + offset);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(header_bytes);
        for (_, t) in &self.matrices {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses the container byte layout, validating magic, version,
    /// header integrity, and that every stated matrix lies inside the
    /// payload. Values widen binary32 → binary64.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format("container shorter than the fixed 12-byte prelude"));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::format(format!(
                "bad magic {:?}, expected \"PTES\"",
                String::from_utf8_lossy(&bytes[0..4])
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(Error::format("truncated header"));
        }
        let header_str = std::str::from_utf8(&bytes[12..12 + header_len])
            .map_err(|_| Error::format("header is not valid UTF-8"))?;
        let header: Header = serde_json::from_str(header_str)
            .map_err(|e| Error::format(format!("header is not valid JSON: {e}")))?;

        let payload = &bytes[12 + header_len..];
        let mut matrices = Vec::with_capacity(header.matrices.len());
        for entry in &header.matrices {
            let n_bytes = entry
                .rows
                .checked_mul(entry.cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format("matrix size overflows"))?;
            let end = entry
                .offset
                .checked_add(n_bytes)
                .ok_or_else(|| Error::format("matrix offset overflows"))?;
            if end > payload.len() {
                return Err(Error::format(format!(
                    "truncated payload: matrix '{}' needs bytes {}..{} of {}",
                    entry.name,
                    entry.offset,
                    end,
                    payload.len()
                )));
            }
            let data: Vec<f64> = payload[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            matrices.push((entry.name.clone(), Tensor::matrix(entry.rows, entry.cols, data)?));
        }
        Ok(Container {
            dim: header.dim,
            classes: header.classes,
            matrices,
            labels: header.labels,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Embedding container with the tighter contract embedding files obey:
/// every matrix has exactly `dim` columns and each label vector sums to 1.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    inner: Container,
}

impl EmbeddingStore {
    pub fn new(dim: usize, class_names: Vec<String>) -> Self {
        EmbeddingStore { inner: Container::new(dim, class_names) }
    }

    pub fn from_container(inner: Container) -> Result<Self> {
        for name in inner.matrix_names().map(str::to_string).collect::<Vec<_>>() {
            let t = inner.matrix(&name).unwrap();
            if t.shape()[1] != inner.dim {
                return Err(Error::format(format!(
                    "matrix '{}' has {} columns, store dim is {}",
                    name,
                    t.shape()[1],
                    inner.dim
                )));
            }
        }
        if let Some(labels) = &inner.labels {
            for (i, l) in labels.iter().enumerate() {
                let s: f64 = l.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::format(format!(
                        "label {i} sums to {s}, expected 1 within 1e-6"
                    )));
                }
            }
        }
        Ok(EmbeddingStore { inner })
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.inner.classes
    }

    pub fn insert_matrix(&mut self, name: &str, t: Tensor) -> Result<()> {
        if t.rank() != 2 || t.shape()[1] != self.inner.dim {
            return Err(Error::format(format!(
                "embedding matrix '{name}' must have {} columns, got shape {:?}",
                self.inner.dim,
                t.shape()
            )));
        }
        self.inner.insert_matrix(name, t)
    }

    pub fn matrix(&self, name: &str) -> Option<&Tensor> {
        self.inner.matrix(name)
    }

    pub fn set_labels(&mut self, labels: Vec<Vec<f64>>) -> Result<()> {
        for (i, l) in labels.iter().enumerate() {
            let s: f64 = l.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::format(format!("label {i} sums to {s}, expected 1")));
            }
        }
        self.inner.labels = Some(labels);
        Ok(())
    }

    pub fn labels(&self) -> Option<&Vec<Vec<f64>>> {
        self.inner.labels.as_ref()
    }

    pub fn set_meta(&mut self, meta: serde_json::Value) {
        self.inner.meta = Some(meta);
    }

    pub fn meta(&self) -> Option<&serde_json::Value> {
        self.inner.meta.as_ref()
    }

    pub fn container(&self) -> &Container {
        &self.inner
    }
}

pub fn save_embedding_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    store.inner.save(path)
}

pub fn load_embedding_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::from_container(Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical_at_f32_precision() {
        let mut c = Container::new(2, vec!["a".into(), "b".into()]);
        let m = Tensor::matrix(2, 2, vec![0.25, -1.5, 3.0, 0.125]).unwrap();
        c.insert_matrix("w", m.clone()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.matrix("w").unwrap(), &m);
        // Re-serialization reproduces the exact bytes.
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut c = Container::new(2, vec![]);
        c.insert_matrix("w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let mut bytes = c.to_bytes().unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_a_format_error() {
        let c = Container::new(2, vec![]);
        let mut bytes = c.to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let mut c = Container::new(2, vec![]);
        c.insert_matrix("w", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(Container::from_bytes(cut), Err(Error::Format(_))));
    }

    #[test]
    fn payload_bytes_are_little_endian_binary32() {
        // One class, d=2, matrix [[0.6, 0.8]]: the payload must be the
        // eight LE binary32 bytes of 0.6 then 0.8, written independently
        // here via f32::to_le_bytes on literal constants.
        let mut store = EmbeddingStore::new(2, vec!["only".into()]);
        store
            .insert_matrix("handcrafted_embeddings", Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap())
            .unwrap();
        let bytes = store.container().to_bytes().unwrap();
        let header_len =
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload = &bytes[12 + header_len..];
        let mut expected = Vec::new();
        expected.extend_from_slice(&0.6f32.to_le_bytes());
        expected.extend_from_slice(&0.8f32.to_le_bytes());
        assert_eq!(payload, expected.as_slice());
    }

    #[test]
    fn embedding_store_rejects_dim_mismatch_and_bad_labels() {
        let mut store = EmbeddingStore::new(3, vec![]);
        let narrow = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(store.insert_matrix("w", narrow).is_err());
        assert!(store.set_labels(vec![vec![0.9, 0.2]]).is_err());
        assert!(store.set_labels(vec![vec![0.5, 0.5]]).is_ok());
    }
}
