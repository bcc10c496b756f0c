//! `ADKH1` tensor container shared by head checkpoints and memory banks.
//!
//! Layout: the 5-byte magic `ADKH1`, a little-endian `u64` header length,
//! a UTF-8 JSON header listing every tensor (name, shape, dtype, byte offset
//! into the data section), then the raw little-endian `f32` blobs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"ADKH1";
const PREAMBLE: usize = MAGIC.len() + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    tensors: Vec<Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Precondition(format!("duplicate tensor name {name}")));
        }
        self.tensors.push(Tensor { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Shape(format!("container has no tensor named {name}")))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let entry = TensorHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".to_string(),
                    offset,
                };
                offset += 4 * t.data.len() as u64;
                entry
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors,
        })?;

        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(parse_err(0, "missing ADKH1 magic"));
        }
        if bytes.len() < PREAMBLE {
            return Err(parse_err(MAGIC.len() as u64, "truncated header length"));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[MAGIC.len()..PREAMBLE]);
        let header_len = u64::from_le_bytes(len_bytes);
        let data_start = (PREAMBLE as u64)
            .checked_add(header_len)
            .filter(|end| *end <= bytes.len() as u64)
            .ok_or_else(|| {
                parse_err(
                    MAGIC.len() as u64,
                    format!(
                        "header length {header_len} exceeds file size {}",
                        bytes.len()
                    ),
                )
            })? as usize;

        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start]).map_err(|e| {
            // the header is written on a single line, so the column is the byte position
            let col = if e.line() <= 1 {
                e.column().saturating_sub(1)
            } else {
                0
            };
            parse_err((PREAMBLE + col) as u64, format!("invalid header: {e}"))
        })?;

        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let at = data_start as u64 + entry.offset;
            if entry.dtype != "f32" {
                return Err(parse_err(
                    at,
                    format!("tensor {}: unsupported dtype {}", entry.name, entry.dtype),
                ));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start
                .checked_add(count * 4)
                .filter(|end| *end <= data.len())
                .ok_or_else(|| {
                    parse_err(
                        at,
                        format!(
                            "tensor {} needs {} bytes but the file ends at byte {}",
                            entry.name,
                            count * 4,
                            bytes.len()
                        ),
                    )
                })?;
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor {
                name: entry.name,
                shape: entry.shape,
                data: values,
            });
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    /// Writes through a sibling temporary file so a failed write never leaves
    /// a partial container at `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn parse_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}
