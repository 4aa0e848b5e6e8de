//! Atomic file writes, digests and the versioned tensor container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "AQECKPT\0"
//! version  u32       CONTAINER_VERSION
//! hlen     u64       byte length of the JSON header
//! header   hlen      {"kind":..,"metadata":{..},"tensors":[{"name":..,"shape":[..]},..]}
//! blobs              each tensor's values as f64, in header order
//! ```
//!
//! The digest of a container is the SHA-256 of the whole file.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 8] = b"AQECKPT\0";
pub const CONTAINER_VERSION: u32 = 1;

/// Writes `bytes` to a temp file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded container.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

pub fn encode_container(kind: &str, metadata: &serde_json::Value, tensors: &[Tensor]) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_string(),
        metadata: metadata.clone(),
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let n_values: usize = tensors.iter().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(20 + header.len() + 8 * n_values);
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(path: &Path, bytes: &[u8]) -> Result<Container> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 20 || &bytes[..8] != CONTAINER_MAGIC {
        return Err(corrupt("not a checkpoint container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CONTAINER_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut blob = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if blob.len() < n * 8 {
            return Err(corrupt(format!(
                "tensor {:?} truncated: need {} bytes, {} left",
                entry.name,
                n * 8,
                blob.len()
            )));
        }
        let data = blob[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blob = &blob[n * 8..];
        tensors.push(Tensor {
            name: entry.name,
            shape: entry.shape,
            data,
        });
    }
    if !blob.is_empty() {
        return Err(corrupt(format!("{} trailing bytes after last tensor", blob.len())));
    }
    Ok(Container {
        kind: header.kind,
        metadata: header.metadata,
        tensors,
    })
}

/// Writes a container atomically and returns its digest.
pub fn save_container(path: &Path, kind: &str, metadata: &serde_json::Value, tensors: &[Tensor]) -> Result<String> {
    let bytes = encode_container(kind, metadata, tensors)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Reads a container; when `expected_digest` is given the file must match it.
pub fn load_container(path: &Path, expected_digest: Option<&str>) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if let Some(expected) = expected_digest {
        let found = sha256_hex(&bytes);
        if found != expected {
            return Err(Error::Digest {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found,
            });
        }
    }
    decode_container(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Vec<Tensor> {
        vec![
            Tensor {
                name: "a".into(),
                shape: vec![2, 2],
                data: vec![1.0, -2.5, f64::MIN_POSITIVE, 3.0e300],
            },
            Tensor {
                name: "b".into(),
                shape: vec![3],
                data: vec![0.1, 0.2, 0.3],
            },
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let digest = save_container(&path, "test", &json!({"seed": 7}), &sample()).unwrap();
        assert_eq!(digest, file_digest(&path).unwrap());
        let c = load_container(&path, Some(&digest)).unwrap();
        assert_eq!(c.tensors, sample());
        assert_eq!(c.metadata["seed"], 7);
        assert_eq!(c.kind, "test");
    }

    #[test]
    fn digest_is_content_addressed() {
        let a = encode_container("k", &json!({}), &sample()).unwrap();
        let b = encode_container("k", &json!({}), &sample()).unwrap();
        assert_eq!(sha256_hex(&a), sha256_hex(&b));
    }

    #[test]
    fn truncated_blob_names_tensor() {
        let bytes = encode_container("k", &json!({}), &sample()).unwrap();
        let cut = &bytes[..bytes.len() - 4];
        let err = decode_container(Path::new("x"), cut).unwrap_err();
        assert!(err.to_string().contains("\"b\""), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_container("k", &json!({}), &sample()).unwrap();
        bytes[8] = 9;
        assert!(matches!(
            decode_container(Path::new("x"), &bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn digest_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_container(&path, "k", &json!({}), &sample()).unwrap();
        assert!(matches!(
            load_container(&path, Some("00")),
            Err(Error::Digest { .. })
        ));
    }

    #[test]
    fn unwritable_path_is_an_error() {
        assert!(write_atomic(Path::new("/nonexistent-dir/x/y.bin"), b"1").is_err());
    }
}
