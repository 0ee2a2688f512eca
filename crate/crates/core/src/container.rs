//! Binary tensor container shared by checkpoints and replay states.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes   "RLENS\0\0\x01"
//! hlen     u64 LE    length of the JSON header in bytes
//! header   hlen      UTF-8 JSON: kind, config, metadata, tensor directory
//! payload            little-endian f64 arrays, offsets relative to payload start
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"RLENS\0\0\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: Value,
    pub metadata: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: Value,
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..8] != MAGIC {
            return Err(Error::Format("missing RLENS magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::Format(format!("bad container header: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut used = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(Error::Format(format!("tensor {} runs past end of file", e.name)));
            }
            used = used.max(end);
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        if used != payload.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last tensor", payload.len() - used)));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let c = Container {
            kind: "test".into(),
            config: serde_json::json!({"a": 1}),
            metadata: serde_json::json!({"note": "x"}),
            tensors: vec![
                ("w".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
                ("b".into(), Tensor::vector(vec![0.1, 0.2])),
            ],
        };
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"RLENS\0\0\x01");
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors.len(), 2);
        for ((_, a), (_, b)) in c.tensors.iter().zip(&back.tensors) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Container::from_bytes(b"NOTRLENS00000000").is_err());
        let c = Container {
            kind: "t".into(),
            config: Value::Null,
            metadata: Value::Null,
            tensors: vec![("w".into(), Tensor::vector(vec![1.0; 4]))],
        };
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(Container::from_bytes(&padded).is_err());
    }
}
