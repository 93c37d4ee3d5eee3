//! Versioned tensor container used by every on-disk artifact.
//!
//! Layout (all integers little-endian):
//! `magic[8] | version u32 | count u64 | manifest | data`
//! where each manifest record is
//! `name_len u32 | name utf8 | dtype u8 | ndim u32 | dims u64 * ndim | offset u64`
//! and `offset` indexes into the raw f64 data section that follows the
//! manifest. Section membership is encoded in tensor names
//! (`teacher/...`, `student/unet/...`, `policy/...`).

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Arr;
use ndarray::{ArrayD, IxDyn};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"RDIFTCKP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Default)]
pub struct Checkpoint {
    entries: Vec<(String, Arr)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_tensor(&mut self, name: &str, v: Arr) {
        assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate checkpoint tensor {name}"
        );
        self.entries.push((name.to_string(), v));
    }

    /// Add every parameter of a store under its prefix.
    pub fn add_store(&mut self, store: &ParamStore) {
        for idx in 0..store.len() {
            self.add_tensor(&store.full_name(idx), store.get(idx).clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy values back into a store. Every parameter must be present with a
    /// matching shape; the first offender is named in the error.
    pub fn load_store(&self, store: &mut ParamStore) -> Result<()> {
        for idx in 0..store.len() {
            let full = store.full_name(idx);
            let src = self.get(&full).ok_or_else(|| Error::CheckpointFormat(
                format!("tensor {full} missing from checkpoint"),
            ))?;
            if src.shape() != store.get(idx).shape() {
                return Err(Error::TensorShape {
                    name: full,
                    expected: store.get(idx).shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            *store.get_mut(idx) = src.clone();
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut manifest: Vec<u8> = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        for (name, v) in &self.entries {
            let offset = data.len() as u64;
            manifest.extend_from_slice(&(name.len() as u32).to_le_bytes());
            manifest.extend_from_slice(name.as_bytes());
            manifest.push(DTYPE_F64);
            manifest.extend_from_slice(&(v.ndim() as u32).to_le_bytes());
            for d in v.shape() {
                manifest.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            manifest.extend_from_slice(&offset.to_le_bytes());
            for x in v.iter() {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        f.write_all(&manifest)?;
        f.write_all(&data)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::CheckpointFormat("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch(format!(
                "file version {version}, expected {VERSION}"
            )));
        }
        let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::CheckpointFormat("non-utf8 tensor name".into()))?;
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::CheckpointFormat(format!(
                    "unsupported dtype code {dtype} for {name}"
                )));
            }
            let ndim = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
            }
            let offset = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
            records.push((name, dims, offset));
        }
        let data_start = cur.pos;
        let mut entries = Vec::with_capacity(count);
        for (name, dims, offset) in records {
            let numel: usize = dims.iter().product();
            let start = data_start + offset;
            let end = start + numel * 8;
            if end > bytes.len() {
                return Err(Error::TruncatedFile(format!(
                    "tensor {name} extends past end of file"
                )));
            }
            let mut vals = Vec::with_capacity(numel);
            for k in 0..numel {
                let off = start + k * 8;
                vals.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), vals)
                .map_err(|e| Error::CheckpointFormat(format!("tensor {name}: {e}")))?;
            entries.push((name, arr));
        }
        Ok(Checkpoint { entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedFile(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
