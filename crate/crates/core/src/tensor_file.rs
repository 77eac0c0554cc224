//! Self-describing container for named float32 arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  b"UNCANNY\0"
//! version    u32      FORMAT_VERSION
//! header_len u64
//! header     header_len bytes of UTF-8 JSON:
//!            {"kind": str, "meta": object,
//!             "tensors": [{"name": str, "shape": [usize], "offset": usize}]}
//! payload    concatenated float32 arrays; `offset` counts elements from the
//!            start of the payload
//! ```
//!
//! Writes go to a sibling temp file that is renamed into place.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UNCANNY\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl TensorFile {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("container has no array named {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let n: usize = a.shape.iter().product();
            if n != a.data.len() {
                return Err(Error::Shape(format!(
                    "array {} has shape {:?} but {} values",
                    a.name,
                    a.shape,
                    a.data.len()
                )));
            }
            entries.push(Entry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                offset,
            });
            offset += n;
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing container magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported container version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        let mut arrays = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > payload.len() {
                return Err(bad(&format!("array {} runs past end of payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn read_kind(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let path = path.as_ref();
        let file = Self::read(path)?;
        if file.kind != kind {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected a {kind:?} container, found {:?}", file.kind),
            });
        }
        Ok(file)
    }
}

/// Writes `bytes` to a temp file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = tmp_path(path);
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f32>(), 0..64), rows in 1usize..4) {
            let cols = values.len() / rows;
            let data: Vec<f32> = values[..rows * cols].to_vec();
            let mut f = TensorFile::new("test", serde_json::json!({"k": 1}));
            f.push(NamedArray { name: "a".into(), shape: vec![rows, cols], data: data.clone() });
            f.push(NamedArray { name: "b".into(), shape: vec![1], data: vec![3.5] });
            let bytes = f.to_bytes().unwrap();
            let back = TensorFile::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.kind.as_str(), "test");
            let a = back.get("a").unwrap();
            prop_assert_eq!(&a.shape, &vec![rows, cols]);
            let bits: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(TensorFile::from_bytes(b"hello world, not a container", Path::new("x")).is_err());
        let mut f = TensorFile::new("k", serde_json::Value::Null);
        f.push(NamedArray {
            name: "a".into(),
            shape: vec![4],
            data: vec![1.0, 2.0, 3.0, 4.0],
        });
        let bytes = f.to_bytes().unwrap();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 2], Path::new("x")).is_err());
    }

    #[test]
    fn atomic_write_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/f.bin");
        let f = TensorFile::new("latent", serde_json::json!({}));
        f.write(&p).unwrap();
        assert!(TensorFile::read_kind(&p, "latent").is_ok());
        assert!(TensorFile::read_kind(&p, "generator").is_err());
        let leftovers: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
