//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "GMMCKPT1"  u32 version
//! body:
//!   u32 len, config text (UTF-8)
//!   u64 epoch, u64 step
//!   u32 count, then per tensor: u32 len, name, u32 ndims, u64 dims.., f64 payload..
//!   u32 count, optimizer tensors in the same encoding
//! u32 CRC-32 of the body
//! ```

use std::path::Path;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GMMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
    /// AdamW moments, named `m.<tensor>` and `v.<tensor>`; empty before the
    /// first step.
    pub optimizer: Vec<NamedTensor>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensors(buf: &mut Vec<u8>, ts: &[NamedTensor]) -> Result<()> {
    put_u32(buf, ts.len())?;
    for t in ts {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?} but {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        put_u32(buf, t.name.len())?;
        buf.extend_from_slice(t.name.as_bytes());
        put_u32(buf, t.shape.len())?;
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        let text = self.config.to_text();
        put_u32(&mut body, text.len())?;
        body.extend_from_slice(text.as_bytes());
        body.extend_from_slice(&self.epoch.to_le_bytes());
        body.extend_from_slice(&self.step.to_le_bytes());
        put_tensors(&mut body, &self.tensors)?;
        put_tensors(&mut body, &self.optimizer)?;

        let mut out = Vec::with_capacity(body.len() + 16);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (body, crc) = bytes[12..].split_at(bytes.len() - 16);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(Error::Checkpoint("checksum mismatch: file is corrupt or truncated".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let text_len = r.u32()?;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let config = RunConfig::parse(text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let tensors = r.tensors()?;
        let optimizer = r.tensors()?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
        }
        Ok(Checkpoint {
            config,
            epoch,
            step,
            tensors,
            optimizer,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint body".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<Vec<NamedTensor>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u32()?;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndims = self.u32()?;
            let mut shape = Vec::with_capacity(ndims.min(8));
            for _ in 0..ndims {
                shape.push(self.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: payload exceeds file")))?;
            let data = self
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            out.push(NamedTensor { name, shape, data });
        }
        Ok(out)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
