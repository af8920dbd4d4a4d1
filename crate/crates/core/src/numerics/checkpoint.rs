//! Versioned container of named tensors.
//!
//! Layout (little-endian): magic `HMFN`, format version `u32`, tensor count `u32`,
//! then per tensor: name length `u64`, UTF-8 name, rank `u64`, dims `u64 * rank`,
//! payload. Version 1 stores `f32` payloads, version 2 stores `f64`.

use std::fs;
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HMFN";
const VERSION_F32: u32 = 1;
const VERSION_F64: u32 = 2;

pub type NamedTensors = Vec<(String, Tensor)>;

/// Payload precision written for the engine's native `Real`.
fn native_version() -> u32 {
    if std::mem::size_of::<Real>() == 4 {
        VERSION_F32
    } else {
        VERSION_F64
    }
}

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Vec<u8> {
    encode_with_version(tensors, native_version())
}

fn encode_with_version(tensors: &[(String, Tensor)], version: u32) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            if version == VERSION_F32 {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<NamedTensors, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    let width = match version {
        VERSION_F32 => 4,
        VERSION_F64 => 8,
        v => return Err(format!("unsupported format version {}", v)),
    };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = r.u64()? as usize;
        if rank > 8 {
            return Err(format!("tensor {} has implausible rank {}", name, rank));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(width).ok_or("size overflow")?)?;
        let data: Vec<Real> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect()
        };
        out.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_checkpoint(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<NamedTensors> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        vec![
            ("encoder.w".into(), Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 0.125, 7.0]).unwrap()),
            ("step".into(), Tensor::scalar(12.0)),
            ("empty".into(), Tensor::zeros(&[0])),
        ]
    }

    #[test]
    fn header_layout() {
        let bytes = encode_with_version(&sample(), VERSION_F32);
        assert_eq!(&bytes[..4], b"HMFN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // first entry: name length, name, rank, dims, then 6 f32 values
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 9);
        assert_eq!(&bytes[20..29], b"encoder.w");
        assert_eq!(u64::from_le_bytes(bytes[29..37].try_into().unwrap()), 2);
        let first_value = f32::from_le_bytes(bytes[53..57].try_into().unwrap());
        assert_eq!(first_value, 0.5);
    }

    #[test]
    fn round_trip_both_versions() {
        for v in [VERSION_F32, VERSION_F64] {
            let back = decode_checkpoint(&encode_with_version(&sample(), v)).unwrap();
            assert_eq!(back, sample());
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
    }
}
