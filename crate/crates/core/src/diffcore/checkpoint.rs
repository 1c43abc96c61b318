//! Checkpoint container.
//!
//! Layout:
//!
//! ```text
//! EPCR-CHECKPOINT v1\n
//! <header: one line of JSON>\n
//! <payload: raw little-endian values, entries in declaration order>
//! ```
//!
//! The header is `{"entries":[{"name","shape","dtype","offset"}...],
//! "meta":{...},"payload_bytes":N}`; `offset` is relative to the first
//! payload byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::element::{DType, Element};
use super::tensor::{Shape, Tensor};

pub const MAGIC: &str = "EPCR-CHECKPOINT v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub shape: Shape,
    pub dtype: DType,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    entries: Vec<EntryHeader>,
    meta: serde_json::Value,
    payload_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: serde_json::Value,
    pub entries: Vec<(String, Tensor<T>)>,
}

pub fn encode<T: Element>(meta: &serde_json::Value, entries: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut headers = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        headers.push(EntryHeader {
            name: name.to_string(),
            shape: t.shape(),
            dtype: T::DTYPE,
            offset: payload.len(),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        entries: headers,
        meta: meta.clone(),
        payload_bytes: payload.len(),
    };
    let mut out = Vec::with_capacity(payload.len() + 256);
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(
        serde_json::to_string(&header)
            .expect("header serializes")
            .as_bytes(),
    );
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn decode<T: Element>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let corrupt = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let magic_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing magic line".into()))?;
    if &bytes[..magic_end] != MAGIC.as_bytes() {
        return Err(corrupt("bad magic; not a checkpoint file".into()));
    }
    let rest = &bytes[magic_end + 1..];
    let header_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..header_end])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let payload = &rest[header_end + 1..];
    if payload.len() != header.payload_bytes {
        return Err(corrupt(format!(
            "payload is {} bytes, header declares {} (file truncated or padded)",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut entries = Vec::with_capacity(header.entries.len());
    for e in header.entries {
        let numel: usize = e.shape.iter().product();
        let width = e.dtype.size_of();
        let end = e.offset + numel * width;
        if end > payload.len() {
            return Err(corrupt(format!(
                "entry `{}` extends past end of payload",
                e.name
            )));
        }
        let raw = &payload[e.offset..end];
        let data: Vec<T> = match e.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::read_le(c)))
                .collect(),
        };
        entries.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Checkpoint {
        meta: header.meta,
        entries,
    })
}

pub fn write<T: Element>(
    path: &Path,
    meta: &serde_json::Value,
    entries: &[(&str, &Tensor<T>)],
) -> Result<()> {
    std::fs::write(path, encode(meta, entries)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_truncation_is_detected() {
        let a =
            Tensor::<f32>::from_fn([2, 1, 1, 3], |[n, _, _, w]| (n * 3 + w) as f32 * 0.1 - 0.05);
        let b = Tensor::<f32>::full([4, 1, 1, 1], f32::MIN_POSITIVE);
        let meta = serde_json::json!({"arch": "toy"});
        let bytes = encode(&meta, &[("a", &a), ("b", &b)]);
        let ck: Checkpoint<f32> = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.entries[0], ("a".to_string(), a.clone()));
        assert_eq!(ck.entries[1].1, b);
        let refs: Vec<(&str, &Tensor<f32>)> =
            ck.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        assert_eq!(encode(&ck.meta, &refs), bytes);

        let err = decode::<f32>(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
