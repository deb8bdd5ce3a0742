//! Single-file checkpoint archive.
//!
//! ```text
//! "SESAMECK" | u32 version | u32 len, kind | u32 len, JSON header
//! | u32 count | count × (u32 len, name | u8 dtype | u32 rank | rank × u64 dim | data)
//! | sha256 of everything before
//! ```
//!
//! All integers and array elements are little-endian. The header is JSON with
//! sorted keys, so saving a loaded archive reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SESAMECK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Archive {
    pub kind: String,
    pub header: serde_json::Value,
    pub arrays: BTreeMap<String, Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptArchive("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptArchive("invalid utf-8".into()))
    }
}

impl Archive {
    pub fn new(kind: impl Into<String>, header: serde_json::Value) -> Self {
        Self { kind: kind.into(), header, arrays: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.insert(name.into(), t.detach());
    }

    /// Arrays whose names start with `prefix`, keyed by the full name.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.arrays.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.kind);
        put_str(&mut out, &serde_json::to_string(&self.header)?);
        put_u32(&mut out, self.arrays.len() as u32);
        for (name, t) in &self.arrays {
            put_str(&mut out, name);
            let code = match t.dtype() {
                DType::F32 => 0u8,
                DType::F64 => 1u8,
                other => return Err(Error::Config(format!("cannot archive {other:?} array {name}"))),
            };
            out.push(code);
            put_u32(&mut out, t.rank() as u32);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let flat = t.flatten_all()?;
            match code {
                0 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::CorruptArchive("not a checkpoint archive".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CorruptArchive("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let kind = r.string()?;
        let header = serde_json::from_str(&r.string()?)?;
        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let code = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let t = match code {
                0 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CorruptArchive("size".into()))?)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::CorruptArchive("size".into()))?)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                other => return Err(Error::CorruptArchive(format!("unknown dtype code {other}"))),
            };
            arrays.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::CorruptArchive("trailing bytes".into()));
        }
        Ok(Self { kind, header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write then rename so a crash never leaves a half-written archive.
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Short content hash of an archive file, used as a model version tag.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let d = Sha256::digest(&bytes);
    Ok(d.iter().take(6).map(|b| format!("{b:02x}")).collect())
}
