//! Length-prefixed named-tensor container used for checkpoints
//! ("SSMCKPT1") and synthetic dataset files ("SSMDATA1").
//!
//! Layout: 8-byte magic, u32 blob count, then per blob a u32-length
//! UTF-8 name, u32 rank, u32 dims, and row-major 64-bit LE floats.
//! Files are written to a temp sibling and renamed into place, so a
//! failed write never leaves a partial artifact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"SSMCKPT1";
pub const DATA_MAGIC: &[u8; 8] = b"SSMDATA1";

pub fn write_container(path: &Path, magic: &[u8; 8], blobs: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, t) in blobs {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path, magic: &[u8; 8]) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path)?;
    let bad = |what: &str| {
        Error::Format(format!("{}: {what}", path.display()))
    };
    if buf.len() < 12 || &buf[0..8] != magic {
        return Err(bad(&format!(
            "missing {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut at = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > buf.len() {
            return Err(Error::Format(format!("{}: truncated", path.display())));
        }
        let s = &buf[at..at + n];
        at += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| bad("blob name is not UTF-8"))?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if rank != 2 {
            return Err(bad(&format!("unsupported rank {rank}")));
        }
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let raw = take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs.push((name, Tensor::new(rows, cols, data)?));
    }
    if at != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(blobs)
}
