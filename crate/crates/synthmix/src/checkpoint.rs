//! Binary model container used for generator and classifier weights.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic   b"SMCK"
//! version u32 (currently 1)
//! arch    u32 length + UTF-8 bytes
//! note    u32 length + UTF-8 bytes (free-form, e.g. a training manifest)
//! meta    u32 count, then per entry: u32 key length, key bytes, i64 value
//! params  u32 count, then per block:
//!         u32 name length, name bytes
//!         u8  dtype tag (1 = f32)
//!         u32 ndim, u64 dims...
//!         f32 values in row-major order
//! ```
//!
//! Saves go through a sibling temp file and a rename, so a crash mid-write
//! never leaves a half-written checkpoint at the target path.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

/// Guards against allocating on garbage length fields from corrupt files.
const MAX_NAME: u32 = 4096;
const MAX_ENTRIES: u32 = 1 << 20;

/// Named weight arrays plus enough metadata to rebuild the owning model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub note: String,
    pub meta: BTreeMap<String, i64>,
    pub params: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn new(arch: impl Into<String>) -> Self {
        Checkpoint {
            arch: arch.into(),
            note: String::new(),
            meta: BTreeMap::new(),
            params: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Result<i64> {
        self.meta.get(key).copied().ok_or_else(|| {
            Error::Format(format!("checkpoint missing metadata key {key:?}"))
        })
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f32>) {
        self.params.push((name.into(), value));
    }

    /// Look up a parameter by name.
    pub fn param(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Format(format!("checkpoint missing parameter {name:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &self.params {
            if !seen.insert(name.as_str()) {
                return Err(Error::Consistency(format!(
                    "duplicate parameter name {name:?} in checkpoint"
                )));
            }
        }
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.tmp-{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt"),
            std::process::id()
        ));
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            self.write_to(&mut w).map_err(|e| Error::io(&tmp, e))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.arch)?;
        write_str(w, &self.note)?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (key, value) in &self.meta {
            write_str(w, key)?;
            w.write_all(&value.to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in &self.params {
            write_str(w, name)?;
            w.write_all(&[DTYPE_F32])?;
            w.write_all(&(value.ndim() as u32).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let value = value.as_standard_layout();
            for &v in value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read_from(&mut r).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {magic:02x?}, expected {MAGIC:02x?}"
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let arch = read_str(r)?;
        let note = read_long_str(r)?;
        let mut meta = BTreeMap::new();
        let meta_len = read_u32(r)?;
        if meta_len > MAX_ENTRIES {
            return Err(Error::Format(format!("implausible metadata count {meta_len}")));
        }
        for _ in 0..meta_len {
            let key = read_str(r)?;
            let mut buf = [0u8; 8];
            read_exact(r, &mut buf)?;
            meta.insert(key, i64::from_le_bytes(buf));
        }
        let param_len = read_u32(r)?;
        if param_len > MAX_ENTRIES {
            return Err(Error::Format(format!("implausible parameter count {param_len}")));
        }
        let mut params = Vec::with_capacity(param_len as usize);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..param_len {
            let name = read_str(r)?;
            if !seen.insert(name.clone()) {
                return Err(Error::Consistency(format!(
                    "duplicate parameter name {name:?} in checkpoint"
                )));
            }
            let mut tag = [0u8; 1];
            read_exact(r, &mut tag)?;
            if tag[0] != DTYPE_F32 {
                return Err(Error::Format(format!(
                    "unsupported dtype tag {} for parameter {name:?}",
                    tag[0]
                )));
            }
            let ndim = read_u32(r)?;
            if ndim > 8 {
                return Err(Error::Format(format!(
                    "implausible rank {ndim} for parameter {name:?}"
                )));
            }
            let mut shape = Vec::with_capacity(ndim as usize);
            let mut total = 1usize;
            for _ in 0..ndim {
                let mut buf = [0u8; 8];
                read_exact(r, &mut buf)?;
                let d = u64::from_le_bytes(buf) as usize;
                total = total.checked_mul(d).ok_or_else(|| {
                    Error::Format(format!("dimension overflow in parameter {name:?}"))
                })?;
                shape.push(d);
            }
            if total > (1 << 30) {
                return Err(Error::Format(format!(
                    "implausible element count {total} for parameter {name:?}"
                )));
            }
            let mut bytes = vec![0u8; total * 4];
            read_exact(r, &mut bytes)?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let array = ArrayD::from_shape_vec(shape, values)
                .map_err(|e| Error::Format(format!("parameter {name:?}: {e}")))?;
            params.push((name, array));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { arch, note, meta, params })
    }

    /// Copy checkpoint values into matching parameters, by name.
    ///
    /// Every checkpoint parameter must land somewhere and shapes must match
    /// exactly; targets not named in the checkpoint are left untouched.
    pub fn apply(&self, targets: Vec<&mut crate::nn::Param<f32>>) -> Result<()> {
        let mut used = vec![false; self.params.len()];
        for target in targets {
            let Some(i) = self.params.iter().position(|(n, _)| *n == target.name) else {
                continue;
            };
            used[i] = true;
            let value = &self.params[i].1;
            if target.value.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {:?}: checkpoint shape {:?} vs model shape {:?}",
                    target.name,
                    value.shape(),
                    target.value.shape()
                )));
            }
            target.value.assign(value);
        }
        if let Some(i) = used.iter().position(|&u| !u) {
            return Err(Error::Consistency(format!(
                "checkpoint parameter {:?} has no target",
                self.params[i].0
            )));
        }
        Ok(())
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    read_str_capped(r, MAX_NAME)
}

/// The note field holds free-form text (manifests), so it gets a larger cap.
fn read_long_str(r: &mut impl Read) -> Result<String> {
    read_str_capped(r, 1 << 20)
}

fn read_str_capped(r: &mut impl Read, cap: u32) -> Result<String> {
    let len = read_u32(r)?;
    if len > cap {
        return Err(Error::Format(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len as usize];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("non-UTF-8 string: {e}")))
}

/// SHA-256 of a file's bytes, hex encoded. Used to key cached artifacts.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(hasher.finalize()))
}
