//! Versioned binary container for named tensors.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "AGEDCKPT" | version u32 | header_len u32 | header (JSON)
//! count u32 | count × { name_len u32 | name | dtype u8 | ndim u32 | dims u64… | data }
//! ```
//!
//! The JSON header carries the artifact kind, config digest, training stage
//! and free-form metadata. Tensor data is row-major, `f32` (dtype 1) or
//! `f64` (dtype 2).

use std::collections::BTreeMap;
use std::path::Path;

use agedit_core::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 8] = b"AGEDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config_digest: String,
    pub stage: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => f32::DTYPE_CODE,
            TensorData::F64(_) => f64::DTYPE_CODE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub version: u32,
    pub header: Header,
    pub tensors: Vec<(String, TensorData)>,
}

impl Container {
    pub fn new(header: Header) -> Self {
        Container {
            version: FORMAT_VERSION,
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push_f32(&mut self, name: &str, t: Tensor<f32>) {
        self.tensors.push((name.to_string(), TensorData::F32(t)));
    }

    pub fn push_f64(&mut self, name: &str, t: Tensor<f64>) {
        self.tensors.push((name.to_string(), TensorData::F64(t)));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.header.meta.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                TensorData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                TensorData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not an agedit container (bad magic)".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version} (expected {FORMAT_VERSION})"));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| format!("bad header: {e}"))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(format!("tensor {name}: implausible rank {ndim}"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor size overflows")?;
            let data = match dtype {
                1 => {
                    let raw = r.take(n.checked_mul(4).ok_or("tensor size overflows")?)?;
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F32(Tensor::new(&shape, v).map_err(|e| format!("tensor {name}: {e}"))?)
                }
                2 => {
                    let raw = r.take(n.checked_mul(8).ok_or("tensor size overflows")?)?;
                    let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F64(Tensor::new(&shape, v).map_err(|e| format!("tensor {name}: {e}"))?)
                }
                d => return Err(format!("tensor {name}: unknown dtype code {d}")),
            };
            tensors.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Container { version, header, tensors })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| AppError::format(path, m))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Write `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn read_text(path: &Path) -> AppResult<String> {
    std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}
