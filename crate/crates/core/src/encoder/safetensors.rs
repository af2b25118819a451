// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reader and writer for the safetensors container.
//!
//! Layout: an 8-byte little-endian `u64` header length `N`, `N` bytes of UTF-8
//! JSON mapping tensor names to `{dtype, shape, data_offsets}`, then the
//! payload. Offsets are relative to the payload start. An optional
//! `__metadata__` entry holds string pairs and is ignored on read. Only `F32`
//! tensors are supported.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn err(msg: impl Into<String>) -> Error {
    Error::Safetensors(msg.into())
}

/// Parses an in-memory safetensors buffer.
pub fn parse_safetensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let Some((len_bytes, rest)) = bytes.split_first_chunk::<8>() else {
        return Err(err(format!(
            "truncated file: {} bytes, need at least 8 for the header length",
            bytes.len()
        )));
    };
    let header_len = usize::try_from(u64::from_le_bytes(*len_bytes))
        .map_err(|_| err("header length does not fit in memory"))?;
    if header_len > rest.len() {
        return Err(err(format!(
            "truncated file: header claims {header_len} bytes, {} available",
            rest.len()
        )));
    }
    let (header, payload) = rest.split_at(header_len);
    let header =
        std::str::from_utf8(header).map_err(|e| err(format!("header is not UTF-8: {e}")))?;
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(header).map_err(|e| err(format!("bad header JSON: {e}")))?;

    let mut infos = Vec::with_capacity(raw.len());
    for (name, value) in raw {
        if name == METADATA_KEY {
            continue;
        }
        let info: TensorInfo = serde_json::from_value(value)
            .map_err(|e| err(format!("bad header entry `{name}`: {e}")))?;
        infos.push((name, info));
    }

    let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(infos.len());
    for (name, info) in &infos {
        let [begin, end] = info.data_offsets;
        if begin > end {
            return Err(err(format!(
                "tensor `{name}` has inverted offsets [{begin}, {end}]"
            )));
        }
        if end > payload.len() {
            return Err(err(format!(
                "truncated file: tensor `{name}` ends at {end}, payload is {} bytes",
                payload.len()
            )));
        }
        spans.push((begin, end, name));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        let ((_, prev_end, prev), (begin, _, next)) = (pair[0], pair[1]);
        if begin < prev_end {
            return Err(err(format!(
                "overlapping offsets for `{prev}` and `{next}`"
            )));
        }
    }

    let mut out = BTreeMap::new();
    for (name, info) in infos {
        if info.dtype != "F32" {
            return Err(err(format!(
                "unsupported dtype {} for `{name}` (only F32)",
                info.dtype
            )));
        }
        let numel: usize = info.shape.iter().product();
        let [begin, end] = info.data_offsets;
        if end - begin != numel * 4 {
            return Err(err(format!(
                "tensor `{name}` spans {} bytes but shape {:?} needs {}",
                end - begin,
                info.shape,
                numel * 4
            )));
        }
        let data = payload[begin..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor =
            Tensor::new(info.shape, data).map_err(|e| err(format!("tensor `{name}`: {e}")))?;
        out.insert(name, tensor);
    }
    Ok(out)
}

/// Reads a safetensors file into a name-to-tensor map.
pub fn load_safetensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_safetensors(&bytes)
}

/// Serializes tensors in name order; the header is space-padded to a multiple
/// of 8 bytes.
pub fn serialize_safetensors(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in tensors {
        if name == METADATA_KEY {
            return Err(err(format!("`{METADATA_KEY}` is reserved")));
        }
        let len = t.numel() * 4;
        header.insert(
            name.as_str(),
            TensorInfo {
                dtype: "F32".into(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, offset + len],
            },
        );
        offset += len;
    }
    let mut header = serde_json::to_vec(&header)?;
    while header.len() % 8 != 0 {
        header.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_safetensors(path: impl AsRef<Path>, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let path = path.as_ref();
    let bytes = serialize_safetensors(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn minimal_file() {
        let bytes = file(
            r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#,
            &1.5f32.to_le_bytes(),
        );
        let m = parse_safetensors(&bytes).unwrap();
        assert_eq!(m["a"].data(), &[1.5]);
        assert_eq!(m["a"].shape(), &[1]);
    }

    #[test]
    fn metadata_is_skipped() {
        let bytes = file(
            r#"{"__metadata__":{"format":"pt"},"a":{"dtype":"F32","shape":[],"data_offsets":[0,4]}}"#,
            &2.0f32.to_le_bytes(),
        );
        let m = parse_safetensors(&bytes).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m["a"].shape(), &[] as &[usize]);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(parse_safetensors(&[])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(parse_safetensors(&[1, 0, 0])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        let huge = file(r#"{}"#, &[]);
        let mut huge = huge.clone();
        huge[0] = 200;
        assert!(parse_safetensors(&huge)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        let bad = file("{not json", &[]);
        assert!(parse_safetensors(&bad)
            .unwrap_err()
            .to_string()
            .contains("JSON"));
        let f16 = file(
            r#"{"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#,
            &[0; 4],
        );
        assert!(parse_safetensors(&f16)
            .unwrap_err()
            .to_string()
            .contains("unsupported dtype"));
        let overlap = file(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            &[0; 8],
        );
        assert!(parse_safetensors(&overlap)
            .unwrap_err()
            .to_string()
            .contains("overlapping"));
        let short = file(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
            &[0; 6],
        );
        assert!(parse_safetensors(&short)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        let wrong_len = file(
            r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#,
            &[0; 8],
        );
        assert!(parse_safetensors(&wrong_len).is_err());
    }

    #[test]
    fn writer_pads_header() {
        let mut m = BTreeMap::new();
        m.insert(
            "w".to_owned(),
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let bytes = serialize_safetensors(&m).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        assert_eq!(parse_safetensors(&bytes).unwrap(), m);
    }
}
