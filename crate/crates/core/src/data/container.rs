//! Named-tensor container used for datasets and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "IFR1"            4 bytes magic
//! version           1 byte, currently 1
//! header_len        u32
//! header            header_len bytes of UTF-8 JSON:
//!                   [{"name": .., "shape": [..], "offset": .., "length": ..}, ..]
//! payload           concatenated f64 values
//! ```
//!
//! `offset` and `length` are byte counts relative to the start of the payload.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IFR1";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected \"IFR1\"")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("shape/length mismatch for '{name}': shape {shape:?} needs {expected} bytes, header says {length}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        length: usize,
    },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("invalid tensor name: {0}")]
    InvalidName(String),
    #[error("missing tensor '{0}'")]
    Missing(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ContainerError {
    /// Stable identifier for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            ContainerError::BadMagic => "bad-magic",
            ContainerError::UnsupportedVersion(_) => "unsupported-version",
            ContainerError::Truncated(_) => "truncated-payload",
            ContainerError::ShapeMismatch { .. } => "shape-mismatch",
            ContainerError::BadHeader(_) => "bad-header",
            ContainerError::InvalidName(_) => "invalid-name",
            ContainerError::Missing(_) => "missing-tensor",
            ContainerError::Io { .. } => "io",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

pub type NamedTensors = Vec<(String, Tensor)>;

pub fn find<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor, ContainerError> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| ContainerError::Missing(name.to_string()))
}

pub fn encode_container(tensors: &[(String, Tensor)]) -> Result<Vec<u8>, ContainerError> {
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(ContainerError::InvalidName("empty name".into()));
        }
        if !seen.insert(name.as_str()) {
            return Err(ContainerError::InvalidName(format!("duplicate name '{name}'")));
        }
        let length = t.len() * 8;
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            length,
        });
        offset += length;
    }
    let header = serde_json::to_vec(&entries).map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| ContainerError::BadHeader("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(9 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<NamedTensors, ContainerError> {
    if bytes.len() < 4 {
        return Err(ContainerError::Truncated(format!("{} bytes, no magic", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < 9 {
        return Err(ContainerError::Truncated("preamble cut short".into()));
    }
    if bytes[4] != VERSION {
        return Err(ContainerError::UnsupportedVersion(bytes[4]));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let header_end = 9usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            ContainerError::Truncated(format!(
                "header declares {header_len} bytes, {} available",
                bytes.len() - 9
            ))
        })?;
    let header = std::str::from_utf8(&bytes[9..header_end])
        .map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    let entries: Vec<Entry> =
        serde_json::from_str(header).map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.name.is_empty() || !seen.insert(e.name.clone()) {
            return Err(ContainerError::InvalidName(format!("'{}' empty or repeated", e.name)));
        }
        let expected = e.shape.iter().product::<usize>() * 8;
        if expected != e.length {
            return Err(ContainerError::ShapeMismatch {
                name: e.name,
                shape: e.shape,
                expected,
                length: e.length,
            });
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| {
                ContainerError::Truncated(format!(
                    "'{}' needs bytes {}..{}, payload has {}",
                    e.name,
                    e.offset,
                    e.offset.saturating_add(e.length),
                    payload.len()
                ))
            })?;
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape, data).expect("length checked against shape");
        out.push((e.name, t));
    }
    Ok(out)
}

pub fn save_container(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), ContainerError> {
    let bytes = encode_container(tensors)?;
    fs::write(path, bytes).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_container(path: &Path) -> Result<NamedTensors, ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        vec![
            ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap()),
            ("b".into(), Tensor::from_vec(vec![f64::MIN_POSITIVE, 1e300])),
        ]
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_container(&sample()).unwrap();
        bytes[0] = b'X';
        let err = decode_container(&bytes).unwrap_err();
        assert_eq!(err.code(), "bad-magic");
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_container(&sample()).unwrap();
        let err = decode_container(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.code(), "truncated-payload");
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn unknown_version() {
        let mut bytes = encode_container(&sample()).unwrap();
        bytes[4] = 9;
        assert_eq!(decode_container(&bytes).unwrap_err().code(), "unsupported-version");
    }

    #[test]
    fn shape_length_mismatch() {
        let header = br#"[{"name":"x","shape":[3],"offset":0,"length":16}]"#;
        let mut bytes = MAGIC.to_vec();
        bytes.push(VERSION);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 24]);
        assert_eq!(decode_container(&bytes).unwrap_err().code(), "shape-mismatch");
    }

    #[test]
    fn header_length_past_end() {
        let mut bytes = encode_container(&sample()).unwrap();
        bytes[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
        assert_eq!(decode_container(&bytes).unwrap_err().code(), "truncated-payload");
    }

    #[test]
    fn names_must_be_unique_and_non_empty() {
        let t = Tensor::from_vec(vec![1.0]);
        assert!(encode_container(&[("".into(), t.clone())]).is_err());
        assert!(encode_container(&[("x".into(), t.clone()), ("x".into(), t)]).is_err());
    }

    #[test]
    fn exact_layout() {
        let bytes = encode_container(&[("x".into(), Tensor::from_vec(vec![1.0]))]).unwrap();
        let header = br#"[{"name":"x","shape":[1],"offset":0,"length":8}]"#;
        assert_eq!(&bytes[..4], b"IFR1");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize, header.len());
        assert_eq!(&bytes[9..9 + header.len()], header);
        assert_eq!(&bytes[9 + header.len()..], &1.0f64.to_le_bytes());
    }
}
