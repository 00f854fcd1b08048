//! The `.tcsm` tensor container.
//!
//! ```text
//! "TCSM" | version: u32 | count: u32
//! count x ( name_len: u32 | name: utf-8 | rank: u32 | extents: rank x u64 | data: prod(extents) x f64 )
//! ```
//!
//! All integers and floats are little-endian. Checkpoints hold the network
//! parameters in order; dataset files hold a single tensor named `data`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use tcsm_core::segnet::Params;
use tcsm_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"TCSM";
pub const VERSION: u32 = 1;
const SINGLE_NAME: &str = "data";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor extents overflow")]
    Overflow,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("expected a single tensor, found {0}")]
    NotSingle(usize),
    #[error("invalid tensor: {0}")]
    Tensor(String),
}

pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Overflow)?;
        let s = self.buf.get(self.pos..end).ok_or(FormatError::Truncated(self.buf.len()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| FormatError::BadName)?.to_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| FormatError::Overflow)?;
            n = n.checked_mul(d).ok_or(FormatError::Overflow)?;
            shape.push(d);
        }
        let raw = r.take(n.checked_mul(8).ok_or(FormatError::Overflow)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Tensor(e.to_string()))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - r.pos));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    decode(&bytes).map_err(|source| CliError::Format {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(CliError::io(path))
}

pub fn save_params(path: &Path, params: &Params) -> Result<()> {
    write(path, &encode(params.iter()))
}

pub fn load_params(path: &Path) -> Result<Params> {
    Ok(Params::from_entries(read(path)?))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write(path, &encode([(SINGLE_NAME, t)]))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut entries = read(path)?;
    if entries.len() != 1 {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            source: FormatError::NotSingle(entries.len()),
        });
    }
    Ok(entries.remove(0).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_a_tiny_file() {
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let bytes = encode([("w", &t)]);
        let mut expect = b"TCSM".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend([1, 0, 0, 0, b'w', 1, 0, 0, 0]);
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-0.5f64).to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(decode(&bytes).unwrap(), vec![("w".to_string(), t)]);
    }

    #[test]
    fn scalar_and_empty_tensors() {
        let s = Tensor::scalar(3.5);
        let e = Tensor::zeros(&[0, 4]);
        let bytes = encode([("s", &s), ("e", &e)]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].1, s);
        assert_eq!(back[1].1.shape(), &[0, 4]);
    }

    #[test]
    fn corrupt_inputs() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let good = encode([("x", &t)]);
        assert_eq!(decode(b"NOPE"), Err(FormatError::BadMagic));
        assert_eq!(decode(&good[..2]), Err(FormatError::BadMagic));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert_eq!(decode(&v2), Err(FormatError::Version(2)));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(FormatError::Truncated(_))));
        let mut extra = good.clone();
        extra.push(0);
        assert_eq!(decode(&extra), Err(FormatError::Trailing(1)));
        let mut huge = good.clone();
        huge[21..29].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&huge).is_err());
    }
}
