//! Binary tensor container shared by prediction, feature and parameter files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                         |
//! |------------------|-------------------------------------------------|
//! | 0..8             | magic `VIDENSTC`                                 |
//! | 8..12            | format version (`u32`)                           |
//! | 12..16           | reserved flags (`u32`, zero)                     |
//! | `u64` + bytes    | JSON manifest (object with `kind` and `dtype`)   |
//! | `u64` + bytes    | example ids joined by `\n`                       |
//! | rest             | raw little-endian payload, row-major             |

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 8] = *b"VIDENSTC";
pub const CONTAINER_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: Map<String, Value>,
    pub ids: Vec<String>,
    pub payload: Vec<u8>,
}

impl Container {
    pub fn from_f32(mut manifest: Map<String, Value>, ids: Vec<String>, values: &[f32]) -> Self {
        manifest.insert("dtype".into(), Value::from(Dtype::F32.name()));
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            manifest,
            ids,
            payload,
        }
    }

    pub fn from_f64(mut manifest: Map<String, Value>, ids: Vec<String>, values: &[f64]) -> Self {
        manifest.insert("dtype".into(), Value::from(Dtype::F64.name()));
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            manifest,
            ids,
            payload,
        }
    }

    pub fn kind(&self) -> Option<&str> {
        self.manifest.get("kind").and_then(Value::as_str)
    }

    pub fn dtype(&self) -> Option<Dtype> {
        self.manifest
            .get("dtype")
            .and_then(Value::as_str)
            .and_then(Dtype::parse)
    }

    pub fn manifest_usize(&self, key: &str, path: &Path) -> Result<usize> {
        self.manifest
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::format(path, format!("manifest field {key:?} missing or not a count")))
    }

    pub fn f32_values(&self) -> Vec<f32> {
        self.payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn f64_values(&self) -> Vec<f64> {
        self.payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(bad) = self.ids.iter().find(|id| id.contains('\n')) {
            return Err(Error::InvalidArgument(format!(
                "example id {bad:?} contains a newline"
            )));
        }
        let manifest = serde_json::to_vec(&self.manifest)?;
        let ids = self.ids.join("\n").into_bytes();
        let mut out = Vec::with_capacity(HEADER_LEN + 16 + manifest.len() + ids.len() + self.payload.len());
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&ids);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Parses a container. `n_ids` is read from the manifest's `n_examples`
    /// field when present; otherwise the id block is split on newlines.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < HEADER_LEN {
            return Err(bad("file shorter than header"));
        }
        if bytes[..8] != CONTAINER_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CONTAINER_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let mut cursor = HEADER_LEN;
        let mut take_block = |what: &str| -> Result<&[u8]> {
            if bytes.len() < cursor + 8 {
                return Err(Error::format(path, format!("truncated before {what} length")));
            }
            let len = u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap()) as usize;
            cursor += 8;
            if bytes.len() - cursor < len {
                return Err(Error::format(path, format!("truncated {what} block")));
            }
            let block = &bytes[cursor..cursor + len];
            cursor += len;
            Ok(block)
        };
        let manifest: Value = serde_json::from_slice(take_block("manifest")?)
            .map_err(|e| Error::format(path, format!("manifest is not JSON: {e}")))?;
        let Value::Object(manifest) = manifest else {
            return Err(bad("manifest is not a JSON object"));
        };
        let id_block = std::str::from_utf8(take_block("id")?)
            .map_err(|_| bad("example ids are not UTF-8"))?;
        let n_ids = manifest.get("n_examples").and_then(Value::as_u64);
        let ids: Vec<String> = if n_ids == Some(0) || (n_ids.is_none() && id_block.is_empty()) {
            Vec::new()
        } else {
            id_block.split('\n').map(str::to_owned).collect()
        };
        if let Some(n) = n_ids {
            if ids.len() as u64 != n {
                return Err(Error::format(
                    path,
                    format!("manifest declares {n} examples but id block holds {}", ids.len()),
                ));
            }
        }
        let payload = bytes[cursor..].to_vec();
        let container = Self {
            manifest,
            ids,
            payload,
        };
        let Some(dtype) = container.dtype() else {
            return Err(bad("manifest dtype missing or unknown"));
        };
        if !container.payload.len().is_multiple_of(dtype.width()) {
            return Err(bad("payload length is not a whole number of values"));
        }
        Ok(container)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
