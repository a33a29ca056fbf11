//! Binary checkpoint: `SPG1`, u32 version, u32 tensor count, then per tensor
//! a u16 name length, UTF-8 name, u8 rank, u32 dims and f32 data, all
//! little-endian. Metadata travels as one extra tensor named `__meta__`
//! whose values are the bytes of `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::diff::Tensor;
use crate::nn::ParamSet;

pub const MAGIC: [u8; 4] = *b"SPG1";
pub const VERSION: u32 = 1;
pub const META_TENSOR: &str = "__meta__";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: ParamSet<f32>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(tensors: ParamSet<f32>) -> Self {
        Checkpoint { tensors, meta: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| CheckpointError::Meta(format!("missing key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let v = self.meta(key)?;
        v.parse().map_err(|_| CheckpointError::Meta(format!("key `{key}` has unparsable value `{v}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut text = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(CheckpointError::Meta(format!("key `{k}` or its value contains a separator")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        let meta_bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        let mut entries: Vec<(&str, &[usize], &[f32])> =
            self.tensors.iter().map(|(n, t)| (n, t.shape(), t.data())).collect();
        let meta_shape = [meta_bytes.len()];
        if !meta_bytes.is_empty() {
            entries.push((META_TENSOR, &meta_shape, &meta_bytes));
        }

        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, data) in entries {
            let len = u16::try_from(name.len()).map_err(|_| CheckpointError::Malformed(format!("name `{name}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(shape.len()).map_err(|_| CheckpointError::Malformed("rank above 255".into()))?);
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| CheckpointError::Malformed("dimension above u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let count = r.u32("tensor count")?;
        let mut ckpt = Checkpoint::default();
        for i in 0..count {
            let what = format!("tensor {i} of {count}");
            let len = u16::from_le_bytes(r.take(2, &what)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| CheckpointError::Malformed(format!("{what}: name is not UTF-8")))?
                .to_string();
            let rank = r.take(1, &what)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&what)? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| CheckpointError::Malformed(format!("{what}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), &what)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if name == META_TENSOR {
                let raw: Vec<u8> = data.iter().map(|&v| v as u8).collect();
                let text = String::from_utf8(raw).map_err(|_| CheckpointError::Meta("metadata is not UTF-8".into()))?;
                for line in text.lines() {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| CheckpointError::Meta(format!("line `{line}` is not key=value")))?;
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{what} `{name}`: {e}")))?;
            ckpt.tensors.insert(name.clone(), t).map_err(|e| CheckpointError::Malformed(format!("{e}")))?;
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes after tensor table", bytes.len() - r.pos)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            CheckpointError::Truncated(format!("{what}: needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
