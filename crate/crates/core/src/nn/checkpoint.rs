//! Versioned checkpoint container.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "MXFLCKPT"
//! format_version   u32
//! header_len       u64      followed by a UTF-8 JSON header (networks,
//!                           EMA decay, optimizer step, seed, metadata)
//! param_count      u32      followed by param_count arrays
//! ema_count        u32      followed by ema_count arrays
//!
//! array:  name_len u32, name bytes, rows u32, cols u32, n u64, n x f64
//! ```
//!
//! The same content can be exported to and read back from pretty JSON.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::mlp::Mlp;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MXFLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub networks: Vec<Mlp>,
    pub params: BTreeMap<String, Matrix>,
    pub ema: BTreeMap<String, Matrix>,
    pub ema_decay: f64,
    pub optimizer_step: u64,
    pub seed: u64,
    /// Free-form model description owned by the caller.
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    networks: Vec<Mlp>,
    ema_decay: f64,
    optimizer_step: u64,
    seed: u64,
    metadata: serde_json::Value,
}

fn write_arrays(out: &mut Vec<u8>, arrays: &BTreeMap<String, Matrix>) -> Result<()> {
    out.extend_from_slice(&u32_len(arrays.len())?.to_le_bytes());
    for (name, m) in arrays {
        out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_len(m.rows())?.to_le_bytes());
        out.extend_from_slice(&u32_len(m.cols())?.to_le_bytes());
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn arrays(&mut self) -> Result<BTreeMap<String, Matrix>> {
        let count = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name_len = self.u32()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let n = self.u64()? as usize;
            if n != rows * cols {
                return Err(Error::Format(format!(
                    "`{name}` declares {rows}x{cols} but stores {n} values"
                )));
            }
            let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if out.insert(name.clone(), Matrix::from_vec(rows, cols, data)?).is_some() {
                return Err(Error::Format(format!("duplicate array `{name}`")));
            }
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            networks: self.networks.clone(),
            ema_decay: self.ema_decay,
            optimizer_step: self.optimizer_step,
            seed: self.seed,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        write_arrays(&mut out, &self.params)?;
        write_arrays(&mut out, &self.ema)?;
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let format_version = c.u32()?;
        if format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {format_version}"
            )));
        }
        let header_len = c.u64()? as usize;
        let header: Header = serde_json::from_slice(c.take(header_len)?)?;
        let params = c.arrays()?;
        let ema = c.arrays()?;
        if c.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            format_version,
            networks: header.networks,
            params,
            ema,
            ema_decay: header.ema_decay,
            optimizer_step: header.optimizer_step,
            seed: header.seed,
            metadata: header.metadata,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    /// Reads either the binary container or its JSON export.
    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.starts_with(CHECKPOINT_MAGIC) {
            Self::from_bytes(&buf)
        } else {
            let s = String::from_utf8(buf)
                .map_err(|_| Error::Format("neither binary nor JSON checkpoint".into()))?;
            Self::from_json(&s)
        }
    }
}
