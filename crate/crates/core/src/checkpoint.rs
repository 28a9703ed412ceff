//! Versioned binary checkpoints.
//!
//! Layout (little-endian): the magic `COOPHASH`, a `u32` format version, a
//! `u32`-length-prefixed JSON header (config, ablation mask, image shape,
//! iteration, optimizer step counts), a `u32` block count, then one block per
//! tensor: `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f32` data
//! in row-major order. Generator tensors are named `gen.*`, descriptor
//! tensors `desc.*`, and optimizer moments `opt.{desc,gen}.{m,v}.<tensor>`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossMask;
use crate::nets::ParamStore;
use crate::types::ImageShape;

pub const MAGIC: &[u8; 8] = b"COOPHASH";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: TrainConfig,
    pub mask: LossMask,
    pub shape: ImageShape,
    pub iteration: u64,
    pub desc_steps: u64,
    pub gen_steps: u64,
}

/// A parsed checkpoint: header plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: ParamStore<f32>,
}

pub fn file_name(iteration: u64) -> String {
    format!("ckpt_{iteration}.bin")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(header);
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for e in self.tensors.entries() {
            out.extend((e.name.len() as u32).to_le_bytes());
            out.extend(e.name.as_bytes());
            out.extend((e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in &e.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let count = r.u32()?;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.add(name, shape, data);
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes to a temporary sibling, then renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies every tensor named `prefix + name` into `target` (matching by
    /// name and shape); all of `target` must be covered.
    pub fn restore_into(&self, prefix: &str, target: &mut ParamStore<f32>) -> Result<()> {
        for e in target.entries_mut() {
            let full = format!("{prefix}{}", e.name);
            let id = self.tensors.find(&full).ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
            let src = self.tensors.entry(id);
            if src.shape != e.shape {
                return Err(Error::Checkpoint(format!("tensor {full} has shape {:?}, expected {:?}", src.shape, e.shape)));
            }
            e.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

/// Appends `source`'s tensors to `out` with a name prefix.
pub fn append_prefixed(out: &mut ParamStore<f32>, prefix: &str, source: &ParamStore<f32>) {
    for e in source.entries() {
        out.add(format!("{prefix}{}", e.name), e.shape.clone(), e.data.clone());
    }
}

/// The highest-iteration `ckpt_*.bin` in a directory.
pub fn latest(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let iter = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_")?.strip_suffix(".bin")?.parse::<u64>().ok());
        if let Some(i) = iter {
            if best.as_ref().is_none_or(|(b, _)| i > *b) {
                best = Some((i, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
