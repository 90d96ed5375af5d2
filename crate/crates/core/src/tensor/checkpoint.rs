//! `LTVT` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LTVT"            4 bytes
//! version           u32 (currently 1)
//! parameter count   u32
//! per parameter:
//!     name length   u16, followed by the UTF-8 name
//!     rank          u8
//!     dims          u32 × rank
//!     payload       f32 × product(dims)
//! checksum          u64, sum of all payload bytes mod 2^64
//! ```
//!
//! Values are stored as `f32`; loading widens them back to `f64`.

use std::path::Path;

use super::Tensor;
use crate::binfmt::{byte_sum, ByteReader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LTVT";
pub const VERSION: u32 = 1;

pub fn encode(params: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len())
        .map_err(|_| Error::Contract("too many parameters for a checkpoint".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    let mut checksum = 0u64;
    for (name, tensor) in params {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| Error::Contract(format!("rank of {name} exceeds 255")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Contract(format!("dimension of {name} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        let start = out.len();
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        checksum = checksum.wrapping_add(byte_sum(&out[start..]));
    }
    out.extend_from_slice(&checksum.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION, "checkpoint")?;
    let count = r.u32("parameter count")?;
    let mut params = Vec::new();
    let mut checksum = 0u64;
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_at = r.offset();
        let name = match std::str::from_utf8(r.take(name_len, "parameter name")?) {
            Ok(s) => s.to_owned(),
            Err(_) => {
                return Err(Error::Format {
                    offset: name_at,
                    reason: "parameter name is not UTF-8".into(),
                })
            }
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(numel) = numel.filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining())) else {
            return r.fail(format!("payload of {name} {shape:?} exceeds the file"));
        };
        let payload_at = r.offset();
        let payload = r.take(numel * 4, "payload")?;
        checksum = checksum.wrapping_add(byte_sum(payload));
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|_| Error::Format {
            offset: payload_at,
            reason: format!("payload of {name} holds non-finite values"),
        })?;
        params.push((name, tensor));
    }
    let stored = r.u64("checksum")?;
    if stored != checksum {
        return Err(Error::Format {
            offset: r.offset() - 8,
            reason: format!("checksum mismatch: stored {stored}, computed {checksum}"),
        });
    }
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes after checksum", r.remaining()));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}
