//! On-disk embedding cache.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                                                      |
//! |--------------|------------------------------------------------------------|
//! | 8            | magic `FKEMBED\0`                                          |
//! | 4 (u32)      | header length `H`                                          |
//! | `H`          | UTF-8 JSON `{format_version, dim, provider, model, count}` |
//! | per record   | u32 key length `K`, `K` bytes UTF-8 key, `dim` x f32       |
//!
//! Records are sorted by key. Files are written to a sibling temporary path
//! and renamed into place, so readers never observe a partial cache.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FKEMBED\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub format_version: u32,
    pub dim: usize,
    pub provider: String,
    pub model: String,
    pub count: usize,
}

/// Utterance vectors keyed by [`utterance_key`](crate::corpus::utterance_key).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub provider: String,
    pub model: String,
    vectors: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, provider: impl Into<String>, model: impl Into<String>) -> Self {
        EmbeddingTable {
            dim,
            provider: provider.into(),
            model: model.into(),
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let key = key.into();
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for {key}")));
        }
        self.vectors.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.vectors.get(key).map(Vec::as_slice)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.vectors.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

fn cache_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Cache {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| cache_error(path, "truncated magic"))?;
    if &magic != MAGIC {
        return Err(cache_error(path, "not an embedding cache"));
    }
    let header_len = read_u32(&mut r).map_err(|_| cache_error(path, "truncated header"))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| cache_error(path, "truncated header"))?;
    let header: CacheHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| cache_error(path, format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(cache_error(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }

    let mut table = EmbeddingTable::new(header.dim, header.provider, header.model);
    let mut buf = vec![0u8; header.dim * 4];
    for i in 0..header.count {
        let truncated = |_| cache_error(path, format!("truncated at record {i}"));
        let key_len = read_u32(&mut r).map_err(truncated)? as usize;
        let mut key = vec![0u8; key_len];
        r.read_exact(&mut key).map_err(truncated)?;
        let key = String::from_utf8(key).map_err(|_| cache_error(path, format!("record {i}: key is not UTF-8")))?;
        r.read_exact(&mut buf).map_err(truncated)?;
        let vector = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        table.insert(key, vector)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(cache_error(path, "trailing bytes after last record"));
    }
    Ok(table)
}

pub fn write_cache(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = temp_path(path);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let header = CacheHeader {
            format_version: FORMAT_VERSION,
            dim: table.dim,
            provider: table.provider.clone(),
            model: table.model.clone(),
            count: table.len(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for (key, vector) in table.iter() {
            w.write_all(&(key.len() as u32).to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            for x in vector {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut t = EmbeddingTable::new(3, "stub", "m");
        t.insert("b#0", vec![1.0, -2.5, 3.25]).unwrap();
        t.insert("a#1", vec![0.0, f32::MIN_POSITIVE, 7.0]).unwrap();
        write_cache(&t, &path).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back, t);
        assert!(!temp_path(&path).exists());
    }

    #[test]
    fn layout_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut t = EmbeddingTable::new(1, "p", "m");
        t.insert("k", vec![1.0]).unwrap();
        write_cache(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + h]).unwrap();
        assert_eq!(header["dim"], 1);
        assert_eq!(header["format_version"], 1);
        let rec = &bytes[12 + h..];
        assert_eq!(rec, &[1, 0, 0, 0, b'k', 0x00, 0x00, 0x80, 0x3f]);
    }

    #[test]
    fn rejects_bad_vectors_and_truncation() {
        let mut t = EmbeddingTable::new(2, "p", "m");
        assert!(matches!(t.insert("x", vec![1.0]), Err(Error::DimMismatch { .. })));
        assert!(matches!(t.insert("x", vec![1.0, f32::NAN]), Err(Error::NonFinite(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        t.insert("x", vec![1.0, 2.0]).unwrap();
        write_cache(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_cache(&path), Err(Error::Cache { .. })));
    }
}
