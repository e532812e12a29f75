//! Flat binary parameter container.
//!
//! Layout: the magic `DIL1`, then for every entry until end of file:
//! `u64` name length, UTF-8 name, `u64` rank, `rank` x `u64` dims, and the
//! values as little-endian `f32`. All integers are little-endian.

use std::fs;
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DIL1";

pub fn encode<'a, T: Scalar>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    for (name, t) in entries {
        buf.extend((name.len() as u64).to_le_bytes());
        buf.extend(name.as_bytes());
        buf.extend((t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            buf.extend((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend((v.to_f64() as f32).to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.0.len() < n {
            return Err(format!("truncated while reading {what}"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    let body = bytes
        .strip_prefix(CHECKPOINT_MAGIC.as_slice())
        .ok_or("missing DIL1 magic")?;
    let mut cur = Cursor(body);
    let mut out = Vec::new();
    while !cur.0.is_empty() {
        let name_len = cur.u64("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| format!("parameter name is not UTF-8: {e}"))?
            .to_string();
        let rank = cur.u64("rank")? as usize;
        if rank > 8 {
            return Err(format!("{name}: implausible rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("{name}: dims overflow"))?;
        let raw = cur.take(numel.checked_mul(4).ok_or("size overflow")?, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_checkpoint<'a, T: Scalar>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}
