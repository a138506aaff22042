//! Named-tensor archive: the single on-disk format for datasets, victim
//! checkpoints, and generator checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "NTA1"
//! version u32 (currently 1)
//! count   u32                  entries, including the trailing manifest
//! entry   name_len u16, name UTF-8, dtype u8, rank u8, dims u32 x rank,
//!         payload (row-major scalars, or raw UTF-8 for the manifest)
//! ```
//!
//! Dtype codes: 0 = f32, 1 = f64, 2 = UTF-8 metadata. The last entry must be
//! named `__manifest__` with dtype 2 and holds a JSON document describing
//! whatever the archive carries. Writing the same archive twice produces
//! identical bytes, and load followed by save is byte-exact (stored dtypes
//! are remembered per entry).

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{MtaError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NTA1";
const VERSION: u32 = 1;
const MANIFEST_NAME: &str = "__manifest__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug)]
struct Entry {
    dtype: Dtype,
    tensor: Tensor,
}

/// In-memory archive: ordered named tensors plus a JSON manifest.
#[derive(Debug)]
pub struct Archive {
    entries: IndexMap<String, Entry>,
    pub manifest: String,
}

impl Archive {
    pub fn new(manifest: impl Into<String>) -> Self {
        Archive { entries: IndexMap::new(), manifest: manifest.into() }
    }

    /// Store a tensor (detached values) under `name` as f64.
    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.insert_as(name, t, Dtype::F64);
    }

    pub fn insert_as(&mut self, name: impl Into<String>, t: &Tensor, dtype: Dtype) {
        let name = name.into();
        debug_assert_ne!(name, MANIFEST_NAME, "manifest is written automatically");
        self.entries.insert(name, Entry { dtype, tensor: t.detached() });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    /// Tensor fetch that reports which archive key is missing.
    pub fn require(&self, name: &str, origin: &str) -> Result<Tensor> {
        self.get(name)
            .cloned()
            .ok_or_else(|| MtaError::format(origin, format!("missing tensor entry {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = (self.entries.len() + 1) as u32;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, entry) in &self.entries {
            write_header(&mut out, name, entry.dtype_code(), entry.tensor.shape());
            match entry.dtype {
                Dtype::F32 => {
                    for &v in entry.tensor.data() {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Dtype::F64 => {
                    for &v in entry.tensor.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let m = self.manifest.as_bytes();
        write_header(&mut out, MANIFEST_NAME, 2, &[m.len()]);
        out.extend_from_slice(m);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Archive> {
        let mut cur = Cursor { bytes, pos: 0, origin };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(MtaError::format(origin, "bad magic (not a named-tensor archive)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(MtaError::format(
                origin,
                format!("unsupported archive version {version} (reader supports {VERSION})"),
            ));
        }
        let count = cur.u32()? as usize;
        if count == 0 {
            return Err(MtaError::format(origin, "entry count 0 (manifest entry is mandatory)"));
        }
        let mut entries = IndexMap::new();
        let mut manifest: Option<String> = None;
        for i in 0..count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| MtaError::format(origin, format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let dtype = cur.u8()?;
            let rank = cur.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u32()? as usize);
            }
            let numel: usize = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(
                || MtaError::format(origin, format!("entry {name:?}: dims {dims:?} overflow")),
            )?;
            let is_last = i == count - 1;
            match dtype {
                0 | 1 => {
                    if is_last {
                        return Err(MtaError::format(
                            origin,
                            "last entry must be the __manifest__ metadata entry",
                        ));
                    }
                    let width = if dtype == 0 { 4 } else { 8 };
                    let raw = cur.take(numel * width)?;
                    let data: Vec<f64> = if dtype == 0 {
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                            .collect()
                    } else {
                        raw.chunks_exact(8)
                            .map(|c| {
                                f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                            })
                            .collect()
                    };
                    let tensor = Tensor::from_vec(data, &dims)?;
                    let dt = if dtype == 0 { Dtype::F32 } else { Dtype::F64 };
                    entries.insert(name, Entry { dtype: dt, tensor });
                }
                2 => {
                    if !is_last || name != MANIFEST_NAME {
                        return Err(MtaError::format(
                            origin,
                            format!("metadata entry {name:?} must be the trailing __manifest__"),
                        ));
                    }
                    let raw = cur.take(numel)?;
                    let text = std::str::from_utf8(raw)
                        .map_err(|_| MtaError::format(origin, "manifest is not UTF-8"))?;
                    manifest = Some(text.to_string());
                }
                other => {
                    return Err(MtaError::format(
                        origin,
                        format!("entry {name:?}: unknown dtype code {other}"),
                    ));
                }
            }
        }
        if cur.pos != bytes.len() {
            return Err(MtaError::format(
                origin,
                format!("{} trailing bytes after last entry", bytes.len() - cur.pos),
            ));
        }
        let manifest = manifest
            .ok_or_else(|| MtaError::format(origin, "archive has no __manifest__ entry"))?;
        Ok(Archive { entries, manifest })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive> {
        let bytes = fs::read(path)?;
        Archive::from_bytes(&bytes, &path.display().to_string())
    }
}

impl Entry {
    fn dtype_code(&self) -> u8 {
        match self.dtype {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

fn write_header(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize]) {
    let nb = name.as_bytes();
    assert!(nb.len() <= u16::MAX as usize, "entry name too long");
    out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
    out.extend_from_slice(nb);
    out.push(dtype);
    assert!(dims.len() <= u8::MAX as usize, "rank too large");
    out.push(dims.len() as u8);
    for &d in dims {
        assert!(d <= u32::MAX as usize, "dimension too large");
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MtaError::format(
                self.origin,
                format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_archive() -> Archive {
        let mut a = Archive::new(r#"{"kind":"test","n":3}"#);
        a.insert("x", &Tensor::from_vec(vec![1.5, -2.25, 0.0], &[3]).unwrap());
        a.insert("w/0", &Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4], &[2, 2]).unwrap());
        a
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let a = sample_archive();
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(b.to_bytes(), bytes);
        assert_eq!(b.manifest, a.manifest);
        assert_eq!(b.get("x").unwrap().data(), a.get("x").unwrap().data());
        assert_eq!(b.get("w/0").unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn preserves_entry_order() {
        let a = sample_archive();
        let b = Archive::from_bytes(&a.to_bytes(), "mem").unwrap();
        let names: Vec<&String> = b.names().collect();
        assert_eq!(names, ["x", "w/0"]);
    }

    #[test]
    fn f32_entries_survive_reload_exactly() {
        let mut a = Archive::new("{}");
        a.insert_as("small", &Tensor::from_vec(vec![0.5, -1.25], &[2]).unwrap(), Dtype::F32);
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(b.to_bytes(), bytes);
        assert_eq!(b.get("small").unwrap().data(), &[0.5, -1.25]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = sample_archive().to_bytes();
        bytes[0] = b'X';
        let err = Archive::from_bytes(&bytes, "mem").unwrap_err();
        assert!(matches!(err, MtaError::Format { .. }));
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = sample_archive().to_bytes();
        bytes[4] = 9;
        let err = Archive::from_bytes(&bytes, "mem").unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = sample_archive().to_bytes();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 3], "mem").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_trailing_garbage() {
        let mut bytes = sample_archive().to_bytes();
        bytes.push(0);
        assert!(Archive::from_bytes(&bytes, "mem").is_err());
    }

    #[test]
    fn exit_code_for_format_errors_is_3() {
        let err = Archive::from_bytes(b"nope", "mem").unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
